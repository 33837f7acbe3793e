//! Central finite-difference oracle shared by the gradient tests and the
//! acceptance run.
#![allow(dead_code)]

pub mod gradients;
pub mod reference;
pub mod strategies;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqsleep_core::autodiff::{Graph, Mode, Tensor, Var};
use seqsleep_core::params::ParameterStore;
use seqsleep_core::Result;

pub const STEP: f64 = 1e-5;
pub const GRAPH_SEED: u64 = 17;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

impl FdReport {
    fn record(&mut self, what: String, a: f64, n: f64) {
        let e = rel_err(a, n);
        self.checked += 1;
        if e > self.max_rel || self.worst.is_empty() {
            self.max_rel = self.max_rel.max(e);
            if e >= self.max_rel {
                self.worst = format!("{what}: analytic {a:.6e} numeric {n:.6e}");
            }
        }
    }

    pub fn merge(&mut self, other: FdReport) {
        if other.max_rel >= self.max_rel {
            self.worst = other.worst;
        }
        self.max_rel = self.max_rel.max(other.max_rel);
        self.checked += other.checked;
    }
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Builds the graph, projects the output onto fixed pseudo-random weights
/// and returns the scalar value and the graph.
fn scalar_loss<F>(
    f: &F,
    mode: Mode,
    store: &ParameterStore,
    inputs: &[Tensor],
) -> (f64, Graph, Var, Vec<Var>)
where
    F: Fn(&mut Graph, &ParameterStore, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(mode, GRAPH_SEED);
    g.set_check_finite(false);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, store, &vars).expect("forward");
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let w = Tensor::new(&shape, (0..n).map(|_| rng.random_range(0.5..1.5)).collect()).unwrap();
    let w = g.constant(w);
    let prod = g.mul(out, w);
    let loss = g.sum(prod);
    (g.value(loss).data()[0], g, loss, vars)
}

/// Compares reverse-mode gradients with central differences for every
/// input element and every learnable parameter element, sampling at most
/// `max_elems` of each when there are more.
pub fn check<F>(
    store: &ParameterStore,
    inputs: &[Tensor],
    mode: Mode,
    max_elems: usize,
    f: F,
) -> FdReport
where
    F: Fn(&mut Graph, &ParameterStore, &[Var]) -> Result<Var>,
{
    let (_, g, loss, vars) = scalar_loss(&f, mode, store, inputs);
    let grads = g.backward(loss).expect("backward");
    let mut with_grads = store.clone();
    with_grads.zero_grad();
    g.accumulate_into(&grads, &mut with_grads);
    let mut report = FdReport::default();
    let mut pick = ChaCha8Rng::seed_from_u64(99);

    let mut input_elems: Vec<(usize, usize)> = Vec::new();
    for (k, t) in inputs.iter().enumerate() {
        input_elems.extend((0..t.numel()).map(|i| (k, i)));
    }
    for j in subset(&mut pick, input_elems.len(), max_elems) {
        let (k, i) = input_elems[j];
        let analytic = grads.get(vars[k]).map_or(0.0, |gr| gr[i]);
        let eval = |delta: f64| {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += delta;
            scalar_loss(&f, mode, store, &xs).0
        };
        let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
        report.record(format!("input {k}[{i}]"), analytic, numeric);
    }

    let mut param_elems: Vec<(usize, usize)> = Vec::new();
    for (pi, (_, p)) in store.iter().enumerate() {
        if p.is_learnable() {
            param_elems.extend((0..p.numel()).map(|i| (pi, i)));
        }
    }
    let params: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for j in subset(&mut pick, param_elems.len(), max_elems) {
        let (pi, i) = param_elems[j];
        let id = params[pi];
        let analytic = with_grads.get(id).grad[i];
        let eval = |delta: f64| {
            let mut s = store.clone();
            s.get_mut(id).value[i] += delta;
            scalar_loss(&f, mode, &s, inputs).0
        };
        let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
        report.record(format!("{}[{i}]", store.get(id).name), analytic, numeric);
    }
    report
}

fn subset(rng: &mut ChaCha8Rng, n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, cap).into_vec();
        v.sort_unstable();
        v
    }
}

/// Generated recordings turned into normalized STFT features, using `stats`
/// when given and fitting on the recordings otherwise.
pub fn image_features(
    spec: &seqsleep_core::synthdomain::DomainSpec,
    stats: Option<&seqsleep_core::features::NormalizationStats>,
) -> (
    Vec<seqsleep_core::features::RecordingFeatures>,
    seqsleep_core::features::NormalizationStats,
) {
    use seqsleep_core::features::*;
    let recs = seqsleep_core::synthdomain::generate_domain(spec).unwrap();
    let fspec = FeatureSpec::Image(StftConfig::default());
    let mut feats: Vec<RecordingFeatures> = recs
        .iter()
        .map(|r| RecordingFeatures::extract(r, &fspec).unwrap())
        .collect();
    let stats = match stats {
        Some(s) => s.clone(),
        None => {
            let refs: Vec<&RecordingFeatures> = feats.iter().collect();
            fit_on_features(SplitTag::Train, &refs).unwrap()
        }
    };
    feats.iter_mut().for_each(|f| f.normalize(&stats).unwrap());
    (feats, stats)
}

/// Raw-signal features of a generated domain.
pub fn raw_features(
    spec: &seqsleep_core::synthdomain::DomainSpec,
) -> Vec<seqsleep_core::features::RecordingFeatures> {
    use seqsleep_core::features::*;
    seqsleep_core::synthdomain::generate_domain(spec)
        .unwrap()
        .iter()
        .map(|r| RecordingFeatures::extract(r, &FeatureSpec::Raw).unwrap())
        .collect()
}
