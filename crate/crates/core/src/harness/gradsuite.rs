//! Finite-difference gradient suites over every differentiable primitive and
//! the tiny end-to-end model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::metrics::{charbonnier, CHARBONNIER_EPS};
use crate::model::{build, ModelConfig};
use crate::numcore::{
    grad_check, grad_check_params, GradCheckReport, Graph, ParamStore, Tensor, Var,
};
use crate::prior::DegradationPrior;
use crate::ssm::{flatten, scan_op, selective_scan, ssb, ScanDirection, SsbParams, SsmParams};

/// Tolerance on the max relative error for single primitives.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
/// Tolerance on the max relative error for the end-to-end model.
pub const MODEL_TOLERANCE: f64 = 1e-3;

const SEEDS: u64 = 3;

/// Outcome of one suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Scalar entries compared across all seeds.
    pub checked: usize,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<18} max rel error {:.3e} (tol {:.0e}, {} entries)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_error,
            self.tolerance,
            self.checked
        )
    }
}

type LossFn = Box<dyn Fn(&Graph<f64>, &[Var<f64>]) -> Result<Var<f64>>>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn signed(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape, -1.0, 1.0)
}

/// `sum(f(v) * r)` with a fixed random `r`, so every output entry carries a
/// distinct upstream gradient.
fn projected(f: LossFn, seed: u64) -> impl Fn(&Graph<f64>, &[Var<f64>]) -> Result<Var<f64>> {
    move |g, v| {
        let y = f(g, v)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let r = g.constant(signed(&mut rng, y.shape()));
        g.sum(&g.mul(&y, &r)?)
    }
}

fn projected_params<F>(
    f: F,
    seed: u64,
) -> impl Fn(&Graph<f64>, &ParamStore<f64>) -> Result<Var<f64>>
where
    F: Fn(&Graph<f64>, &ParamStore<f64>) -> Result<Var<f64>>,
{
    move |g, s| {
        let y = f(g, s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let r = g.constant(signed(&mut rng, y.shape()));
        g.sum(&g.mul(&y, &r)?)
    }
}

/// Overwrites every parameter with values uniform in [-1, 1). Initial values
/// can leave some gradients below the finite-difference roundoff floor.
fn scramble(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
}

struct Acc {
    worst: f64,
    checked: usize,
}

impl Acc {
    fn new() -> Self {
        Acc {
            worst: 0.0,
            checked: 0,
        }
    }

    fn add(&mut self, r: GradCheckReport) {
        self.worst = self.worst.max(r.max_rel_error);
        self.checked += r.checked;
    }
}

/// Inputs and loss for one primitive at one seed.
fn primitive_case(name: &str, seed: u64) -> Option<(Vec<Tensor<f64>>, LossFn)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let (b, c, h, w) = (1 + seed as usize % 2, 2 + seed as usize % 2, 4, 5);
    let x = signed(&mut rng, &[b, c, h, w]);
    let oc = 3;
    let stride = 1 + seed as usize % 2;
    let case: (Vec<Tensor<f64>>, LossFn) = match name {
        "conv2d" => (
            vec![x, signed(&mut rng, &[oc, c, 3, 3]), signed(&mut rng, &[oc])],
            Box::new(move |g, v| g.conv2d(&v[0], &v[1], &v[2], stride, 1)),
        ),
        "depthwise_conv2d" => (
            vec![x, signed(&mut rng, &[c, 1, 3, 3])],
            Box::new(|g, v| g.depthwise_conv2d(&v[0], &v[1], 1)),
        ),
        // normalising over few channels leaves gradients that are mostly
        // roundoff, so the suite uses a wider input
        "layer_norm" => {
            let lc = c + 4;
            (
                vec![
                    signed(&mut rng, &[b, lc, h, w]),
                    signed(&mut rng, &[lc]),
                    signed(&mut rng, &[lc]),
                ],
                Box::new(|g, v| g.layer_norm(&v[0], &v[1], &v[2], 1e-5)),
            )
        }
        "linear_axis" => (
            vec![x, signed(&mut rng, &[oc, c]), signed(&mut rng, &[oc])],
            Box::new(|g, v| g.linear_axis(&v[0], &v[1], Some(&v[2]), 1)),
        ),
        "linear" => (
            vec![x, signed(&mut rng, &[oc, w]), signed(&mut rng, &[oc])],
            Box::new(|g, v| g.linear(&v[0], &v[1], &v[2])),
        ),
        "add" => (
            vec![x, signed(&mut rng, &[b, c, h, w])],
            Box::new(|g, v| g.add(&v[0], &v[1])),
        ),
        "sub" => (
            vec![x, signed(&mut rng, &[b, c, h, w])],
            Box::new(|g, v| g.sub(&v[0], &v[1])),
        ),
        "mul" => (
            vec![x, signed(&mut rng, &[b, c, h, w])],
            Box::new(|g, v| g.mul(&v[0], &v[1])),
        ),
        "scale" => (vec![x], Box::new(|g, v| g.scale(&v[0], -1.7))),
        "mul_scalar" => (
            vec![x, signed(&mut rng, &[1])],
            Box::new(|g, v| g.mul_scalar(&v[0], &v[1])),
        ),
        "mul_channel" => (
            vec![x, signed(&mut rng, &[b, c, 1, 1])],
            Box::new(|g, v| g.mul_channel(&v[0], &v[1])),
        ),
        "silu" => (vec![x], Box::new(|g, v| g.silu(&v[0]))),
        "sigmoid" => (vec![x], Box::new(|g, v| g.sigmoid(&v[0]))),
        "softplus" => (vec![x], Box::new(|g, v| g.softplus(&v[0]))),
        "exp" => (vec![x], Box::new(|g, v| g.exp(&v[0]))),
        // kept away from the kink at 0
        "relu" => (
            vec![x.map(|v| v + 0.05f64.copysign(v))],
            Box::new(|g, v| g.relu(&v[0])),
        ),
        // kept away from the clamp bounds
        "clamp" => (
            vec![x.map(|v| {
                if v.abs() < 0.55 && v.abs() > 0.45 {
                    v * 0.5
                } else {
                    v
                }
            })],
            Box::new(|g, v| g.clamp(&v[0], -0.5, 0.5)),
        ),
        "softmax" => (vec![x], Box::new(|g, v| g.softmax(&v[0], 1))),
        "global_avg_pool" => (vec![x], Box::new(|g, v| g.global_avg_pool(&v[0]))),
        "upsample2x" => (vec![x], Box::new(|g, v| g.upsample2x(&v[0]))),
        "crop" => (vec![x], Box::new(|g, v| g.crop(&v[0], 1, 1, 2, 3))),
        "sum" => (vec![x], Box::new(|g, v| g.sum(&v[0]))),
        "mean" => (vec![x], Box::new(|g, v| g.mean(&v[0]))),
        "gather_pixels" => {
            let dir = ScanDirection::ALL[seed as usize % 4];
            (vec![x], Box::new(move |g, v| flatten(g, &v[0], dir)))
        }
        "selective_scan" => {
            let (st, len) = (3, 7);
            (
                vec![
                    signed(&mut rng, &[b, c, len]),
                    uniform(&mut rng, &[b, c, len], 0.1, 1.0),
                    uniform(&mut rng, &[c, st], -2.0, -0.1),
                    signed(&mut rng, &[b, st, len]),
                    signed(&mut rng, &[b, st, len]),
                    signed(&mut rng, &[c]),
                ],
                Box::new(|g, v| scan_op(g, &v[0], &v[1], &v[2], &v[3], &v[4], &v[5])),
            )
        }
        "charbonnier" => {
            let clean = uniform(&mut rng, &[b, c, h, w], 0.0, 1.0);
            (
                vec![clean, uniform(&mut rng, &[b, c, h, w], 0.0, 1.0)],
                Box::new(|g, v| charbonnier(g, &v[0], &v[1], CHARBONNIER_EPS)),
            )
        }
        _ => return None,
    };
    Some(case)
}

/// Names of the single-primitive suites.
pub const PRIMITIVES: &[&str] = &[
    "conv2d",
    "depthwise_conv2d",
    "layer_norm",
    "linear_axis",
    "linear",
    "add",
    "sub",
    "mul",
    "scale",
    "mul_scalar",
    "mul_channel",
    "silu",
    "sigmoid",
    "softplus",
    "exp",
    "relu",
    "clamp",
    "softmax",
    "global_avg_pool",
    "upsample2x",
    "crop",
    "sum",
    "mean",
    "gather_pixels",
    "selective_scan",
    "charbonnier",
];

/// Composite suites: parameterised blocks and the full model.
pub const COMPOSITES: &[&str] = &["ssm_layer", "ssb", "tiny_model"];

fn primitive_suite(name: &str) -> Result<Option<SuiteResult>> {
    let mut acc = Acc::new();
    for seed in 0..SEEDS {
        let Some((inputs, f)) = primitive_case(name, seed) else {
            return Ok(None);
        };
        // the loss is already scalar for reductions; projecting keeps it so
        acc.add(grad_check(projected(f, seed), &inputs, 1e-4)?);
    }
    Ok(Some(SuiteResult {
        name: name.into(),
        max_rel_error: acc.worst,
        tolerance: PRIMITIVE_TOLERANCE,
        checked: acc.checked,
    }))
}

fn ssm_layer_suite() -> Result<SuiteResult> {
    let mut acc = Acc::new();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let mut store = ParamStore::new();
        let p = SsmParams::register(&mut store, "ssm", 2, 3, &mut rng);
        scramble(&mut store, &mut rng);
        let x = signed(&mut rng, &[1, 2, 12]);
        let xs = x.clone();
        let (sp, pp) = (store.clone(), p.clone());
        acc.add(grad_check(
            projected(
                Box::new(move |g, v| selective_scan(g, &sp, &v[0], &pp)),
                seed,
            ),
            &[x],
            1e-4,
        )?);
        acc.add(grad_check_params(
            projected_params(
                |g, s| selective_scan(g, s, &g.constant(xs.clone()), &p),
                seed,
            ),
            &store,
            1e-4,
        )?);
    }
    Ok(SuiteResult {
        name: "ssm_layer".into(),
        max_rel_error: acc.worst,
        tolerance: PRIMITIVE_TOLERANCE,
        checked: acc.checked,
    })
}

fn ssb_suite() -> Result<SuiteResult> {
    let mut acc = Acc::new();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let mut store = ParamStore::new();
        let p = SsbParams::register(&mut store, "ssb", 4, 2, &ScanDirection::ALL, &mut rng);
        scramble(&mut store, &mut rng);
        let x = signed(&mut rng, &[1, 4, 3, 3]);
        acc.add(grad_check_params(
            projected_params(|g, s| ssb(g, s, &g.constant(x.clone()), &p), seed),
            &store,
            1e-4,
        )?);
    }
    Ok(SuiteResult {
        name: "ssb".into(),
        max_rel_error: acc.worst,
        tolerance: PRIMITIVE_TOLERANCE,
        checked: acc.checked,
    })
}

/// Charbonnier loss of the tiny model on an 8x8 image with respect to every
/// parameter, at a randomised parameter point.
pub fn tiny_model_suite() -> Result<SuiteResult> {
    let mut net = build::<f64>(&ModelConfig::tiny(), 9)?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    scramble(net.store_mut(), &mut rng);
    let hazy = uniform(&mut rng, &[1, 3, 8, 8], 0.0, 1.0);
    let clean = uniform(&mut rng, &[1, 3, 8, 8], 0.0, 1.0);
    let prior = DegradationPrior::new(vec![0.45, 0.55])?;
    let r = grad_check_params(
        |g, s| {
            let mut local = net.clone();
            *local.store_mut() = s.clone();
            let y = local.forward(g, &g.constant(hazy.clone()), &prior)?;
            charbonnier(g, &g.constant(clean.clone()), &y, CHARBONNIER_EPS)
        },
        net.store(),
        1e-4,
    )?;
    Ok(SuiteResult {
        name: "tiny_model".into(),
        max_rel_error: r.max_rel_error,
        tolerance: MODEL_TOLERANCE,
        checked: r.checked,
    })
}

/// Every suite name, primitives first.
pub fn suite_names() -> Vec<&'static str> {
    PRIMITIVES.iter().chain(COMPOSITES).copied().collect()
}

/// Runs one suite by name; `None` for an unknown name.
pub fn run_suite(name: &str) -> Result<Option<SuiteResult>> {
    match name {
        "ssm_layer" => ssm_layer_suite().map(Some),
        "ssb" => ssb_suite().map(Some),
        "tiny_model" => tiny_model_suite().map(Some),
        _ => primitive_suite(name),
    }
}

/// Runs every suite.
pub fn run_all() -> Result<Vec<SuiteResult>> {
    suite_names()
        .into_iter()
        .map(|n| run_suite(n).map(|r| r.expect("listed suite")))
        .collect()
}
