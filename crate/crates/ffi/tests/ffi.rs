use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use sgseq_ffi::*;

fn golden(name: &str) -> CString {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/golden").join(name);
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = sgseq_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn vocab_tokenize_and_parse() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.txt");
    std::fs::write(&path, "[ENT]\n[REL]\n[UNK]\n[BOS]\n[EOS]\nand\n,\nman\nhorse\non\n").unwrap();
    let path = CString::new(path.to_str().unwrap()).unwrap();
    let mut v = ptr::null_mut();
    assert_eq!(unsafe { sgseq_vocab_load(path.as_ptr(), &mut v) }, SgseqStatus::Ok);
    let mut size = 0;
    assert_eq!(unsafe { sgseq_vocab_size(v, &mut size) }, SgseqStatus::Ok);
    assert_eq!(size, 10);

    let text = CString::new("man [ENT] on [REL] horse [ENT] and man [ENT] on [REL] horse [ENT]").unwrap();
    let mut len = 0;
    assert_eq!(
        unsafe { sgseq_vocab_tokenize(v, text.as_ptr(), ptr::null_mut(), 0, &mut len) },
        SgseqStatus::BufferTooSmall
    );
    assert_eq!(len, 13);
    let mut ids = vec![0u32; len];
    assert_eq!(
        unsafe { sgseq_vocab_tokenize(v, text.as_ptr(), ids.as_mut_ptr(), ids.len(), &mut len) },
        SgseqStatus::Ok
    );
    assert_eq!(&ids[..6], &[7, 0, 9, 1, 8, 0]);

    let mut stats = SgseqParseStats::default();
    let mut spans = [SgseqSpan::default(); 4];
    let mut n = 0;
    let status = unsafe { sgseq_parse(v, ids.as_ptr(), ids.len(), &mut stats, spans.as_mut_ptr(), spans.len(), &mut n) };
    assert_eq!(status, SgseqStatus::Ok);
    assert_eq!(n, 2);
    assert_eq!(
        (stats.n_triplets, stats.n_unique_triplets, stats.n_rel_tokens),
        (2, 1, 2)
    );
    assert_eq!(
        spans[0],
        SgseqSpan {
            subject_start: 0,
            subject_end: 2,
            predicate_start: 2,
            predicate_end: 4,
            object_start: 4,
            object_end: 6
        }
    );

    let bad = [99u32];
    let status = unsafe { sgseq_parse(v, bad.as_ptr(), 1, &mut stats, spans.as_mut_ptr(), 4, &mut n) };
    assert_eq!(status, SgseqStatus::InvalidArgument);
    assert!(last_error().contains("outside vocabulary"));
    unsafe { sgseq_vocab_free(v) };
}

#[test]
fn evaluate_golden_fixture() {
    let (cats, pred, gt, seen) = (
        golden("categories.json"),
        golden("pred.jsonl"),
        golden("gt.jsonl"),
        golden("seen.tsv"),
    );
    let mut r = ptr::null_mut();
    let status = unsafe {
        sgseq_evaluate_files(cats.as_ptr(), pred.as_ptr(), gt.as_ptr(), seen.as_ptr(), SGSEQ_PROTOCOL_SGDET, &mut r)
    };
    assert_eq!(status, SgseqStatus::Ok, "{}", last_error());
    let value = |key: &str| {
        let k = CString::new(key).unwrap();
        let mut v = f64::NAN;
        assert_eq!(unsafe { sgseq_eval_report_value(r, k.as_ptr(), &mut v) }, SgseqStatus::Ok);
        v
    };
    assert_eq!(value("R@20"), 4.0 / 9.0);
    assert_eq!(value("R@100"), 2.0 / 3.0);
    assert_eq!(value("zR@50"), 1.0 / 3.0);
    let mut text = ptr::null_mut();
    assert_eq!(unsafe { sgseq_eval_report_text(r, &mut text) }, SgseqStatus::Ok);
    let s = unsafe { CStr::from_ptr(text) }.to_str().unwrap().to_string();
    assert!(s.contains("mR@100 = 7/10\n"), "{s}");
    unsafe {
        sgseq_string_free(text);
        sgseq_eval_report_free(r);
    }

    // no seen triplets: zR undefined
    let mut r = ptr::null_mut();
    let status = unsafe {
        sgseq_evaluate_files(cats.as_ptr(), pred.as_ptr(), gt.as_ptr(), ptr::null(), SGSEQ_PROTOCOL_PCLS, &mut r)
    };
    assert_eq!(status, SgseqStatus::Ok);
    let k = CString::new("zR@20").unwrap();
    let mut v = 0.0;
    assert_eq!(unsafe { sgseq_eval_report_value(r, k.as_ptr(), &mut v) }, SgseqStatus::InvalidArgument);
    unsafe { sgseq_eval_report_free(r) };

    let status = unsafe { sgseq_evaluate_files(cats.as_ptr(), pred.as_ptr(), gt.as_ptr(), ptr::null(), 9, &mut r) };
    assert_eq!(status, SgseqStatus::InvalidArgument);
    assert!(r.is_null());
}

#[test]
fn header_declares_every_export() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/sgseq.h")).unwrap();
    let src = std::fs::read_to_string(dir.join("src/lib.rs")).unwrap();
    let mut count = 0;
    for line in src.lines() {
        if let Some(rest) = line.split("extern \"C\" fn ").nth(1) {
            let name = rest.split('(').next().unwrap();
            assert!(header.contains(&format!("{name}(")), "{name} missing from header");
            count += 1;
        }
    }
    assert!(count >= 12);
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler; skipped");
        return;
    };
    if !cc.status.success() {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("use.c");
    std::fs::write(
        &c,
        "#include \"sgseq.h\"\nint main(void) { SgseqBox a = {0, 0, 1, 1}; double v; \
         return sgseq_iou(&a, &a, &v) == SGSEQ_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(include)
        .arg(&c)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
