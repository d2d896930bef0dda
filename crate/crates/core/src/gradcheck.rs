//! Finite-difference verification of the analytic gradients of the box loss
//! and of the grounding network composed with it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::FeatureMatrix;
use crate::grounding::{box_loss, BoxBatch, GroundingConfig, GroundingError, GroundingWeights, Params};
use crate::model::Box2;
use crate::tensor::Matrix;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Test hook: perturbs analytic gradients before comparison.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum Corruption {
    #[default]
    None,
    /// Multiply every analytic component by this factor.
    Scale(f64),
}

impl Corruption {
    fn apply(self, g: f64) -> f64 {
        match self {
            Corruption::None => g,
            Corruption::Scale(s) => g * s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub loss_pairs: usize,
    pub loss_step: f64,
    pub loss_tolerance: f64,
    pub network_step: f64,
    pub network_tolerance: f64,
    pub hidden_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub queries: usize,
    pub feature_rows: usize,
    pub positional_encoding: bool,
    pub corruption: Corruption,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            loss_pairs: 100,
            loss_step: 1e-5,
            loss_tolerance: 1e-4,
            network_step: 1e-6,
            network_tolerance: 1e-3,
            hidden_dim: 8,
            model_dim: 8,
            heads: 2,
            layers: 1,
            queries: 2,
            feature_rows: 5,
            positional_encoding: true,
            corruption: Corruption::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub loss_max_rel_error: f64,
    pub loss_components: usize,
    pub network_max_rel_error: f64,
    pub network_parameters: usize,
    /// Name of the tensor holding the worst network component.
    pub worst_tensor: String,
    pub loss_pass: bool,
    pub network_pass: bool,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.loss_pass && self.network_pass
    }
}

fn random_box(rng: &mut ChaCha8Rng) -> Box2 {
    let w = rng.gen_range(0.05..0.6);
    let h = rng.gen_range(0.05..0.6);
    let x = rng.gen_range(0.0..1.0 - w);
    let y = rng.gen_range(0.0..1.0 - h);
    Box2::new(x, y, x + w, y + h)
}

/// True when no edge of `a` lies within `gap` of an edge of `b` on the same
/// axis, keeping finite differences away from the loss's kinks.
fn edges_apart(a: &Box2, b: &Box2, gap: f64) -> bool {
    let xs = [a.x1, a.x2];
    let ys = [a.y1, a.y2];
    xs.iter().all(|&u| (u - b.x1).abs() >= gap && (u - b.x2).abs() >= gap)
        && ys.iter().all(|&u| (u - b.y1).abs() >= gap && (u - b.y2).abs() >= gap)
}

/// Random non-degenerate `(prediction, target)` pairs.
pub fn random_box_pairs(n: usize, seed: u64) -> Vec<(Box2, Box2)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = random_box(&mut rng);
        let t = random_box(&mut rng);
        if edges_apart(&p, &t, 1e-3) {
            out.push((p, t));
        }
    }
    out
}

/// Max relative error of the box-loss gradient over all pairs and coordinates.
pub fn check_box_loss(pairs: &[(Box2, Box2)], step: f64, corruption: Corruption) -> f64 {
    let mut worst = 0.0f64;
    for (p, t) in pairs {
        let target = BoxBatch(vec![*t]);
        let analytic = box_loss(&BoxBatch(vec![*p]), &target).grad[0];
        for c in 0..4 {
            let shifted = |d: f64| {
                let mut a = p.to_array();
                a[c] += d;
                box_loss(&BoxBatch(vec![Box2::from_array(a)]), &target).value
            };
            let numeric = (shifted(step) - shifted(-step)) / (2.0 * step);
            worst = worst.max(relative_error(corruption.apply(analytic[c]), numeric));
        }
    }
    worst
}

fn flat(w: &GroundingWeights) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    w.visit("", &mut |name, _, data| {
        out.extend(data.iter().map(|&v| (name.clone(), v)));
    });
    out
}

fn nudge(w: &mut GroundingWeights, index: usize, delta: f64) {
    let mut offset = 0;
    w.visit_mut("", &mut |_, _, data| {
        if index >= offset && index < offset + data.len() {
            data[index - offset] += delta;
        }
        offset += data.len();
    });
}

/// Random network, spans, features and targets at the configured size.
pub fn network_problem(
    cfg: &GradcheckConfig,
) -> Result<(GroundingWeights, Vec<Matrix>, FeatureMatrix, BoxBatch), GroundingError> {
    let gc = GroundingConfig {
        hidden_dim: cfg.hidden_dim,
        model_dim: cfg.model_dim,
        heads: cfg.heads,
        ffn_dim: 2 * cfg.model_dim,
        box_hidden_dim: cfg.model_dim,
        layers: cfg.layers,
        positional_encoding: cfg.positional_encoding,
        layer_norm_eps: 1e-5,
    };
    let mut w = GroundingWeights::random(gc, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6ad);
    // move layer-norm gains and biases off their initial values too
    w.visit_mut("", &mut |_, _, data| {
        for v in data.iter_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    });
    let mat = |r: usize, c: usize, rng: &mut ChaCha8Rng| {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    let spans: Vec<Matrix> = (0..cfg.queries)
        .map(|i| mat(2 + i % 2, cfg.hidden_dim, &mut rng))
        .collect();
    let features = FeatureMatrix(mat(cfg.feature_rows, cfg.model_dim, &mut rng));
    let targets = BoxBatch((0..cfg.queries).map(|_| random_box(&mut rng)).collect());
    Ok((w, spans, features, targets))
}

/// Max relative error over every parameter of the network composed with the
/// loss, and the tensor where it occurs.
pub fn check_network(cfg: &GradcheckConfig) -> Result<(f64, usize, String), GroundingError> {
    let (w, spans, features, targets) = network_problem(cfg)?;
    let (_, grad) = w.loss_and_grad(&spans, &features, &targets)?;
    let analytic = flat(&grad);
    let h = cfg.network_step;
    let mut worst = (0.0f64, String::new());
    for (k, (name, a)) in analytic.iter().enumerate() {
        let mut plus = w.clone();
        nudge(&mut plus, k, h);
        let mut minus = w.clone();
        nudge(&mut minus, k, -h);
        let numeric = (plus.loss(&spans, &features, &targets)?
            - minus.loss(&spans, &features, &targets)?)
            / (2.0 * h);
        let e = relative_error(cfg.corruption.apply(*a), numeric);
        if e > worst.0 || worst.1.is_empty() {
            worst = (e.max(worst.0), name.clone());
        }
    }
    Ok((worst.0, analytic.len(), worst.1))
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport, GroundingError> {
    let pairs = random_box_pairs(cfg.loss_pairs, cfg.seed);
    let loss_err = check_box_loss(&pairs, cfg.loss_step, cfg.corruption);
    let (net_err, n, worst_tensor) = check_network(cfg)?;
    Ok(GradcheckReport {
        loss_max_rel_error: loss_err,
        loss_components: 4 * pairs.len(),
        network_max_rel_error: net_err,
        network_parameters: n,
        worst_tensor,
        loss_pass: loss_err < cfg.loss_tolerance,
        network_pass: net_err < cfg.network_tolerance,
    })
}
