//! Central finite-difference verification of analytic gradients.
//!
//! The output of the function under test is contracted with a fixed random
//! tensor `R`; the analytic side backpropagates `R` as the upstream
//! gradient, the numeric side evaluates `Σ out·R` in 64-bit at `x ± h`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BatchNormMode, Tape, Var};
use crate::error::{Error, Result};
use crate::ge::{gather_pool, Extent, GateHook, GatherKind, GeTemplate, GeUnit};
use crate::kernels::{Conv2dSpec, RunningStats};
use crate::nn::Ctx;
use crate::param::ParamStore;
use crate::tensor::{Real, Shape, Tensor};

/// Acceptance rule for one check: at least `pass_fraction` of the sampled
/// coordinates within `rel_tol`, and none beyond `max_rel`.
///
/// Relative error is `|a − n| / max(|a|, |n|, floor)`; the floor turns the
/// comparison absolute for gradients that are numerically zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholds {
    pub step: f64,
    pub rel_tol: f64,
    pub pass_fraction: f64,
    pub max_rel: f64,
    pub floor: f64,
}

impl Thresholds {
    pub const SINGLE: Thresholds = Thresholds {
        step: 1e-5,
        rel_tol: 1e-3,
        pass_fraction: 0.95,
        max_rel: 1e-2,
        floor: 1e-3,
    };

    pub const DOUBLE: Thresholds = Thresholds {
        step: 1e-5,
        rel_tol: 1e-6,
        pass_fraction: 1.0,
        max_rel: 1e-6,
        floor: 1e-3,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn thresholds(self) -> Thresholds {
        match self {
            Precision::Single => Thresholds::SINGLE,
            Precision::Double => Thresholds::DOUBLE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coordinate {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub within: usize,
    pub max_rel: f64,
    /// Coordinates beyond `rel_tol`.
    pub failing: Vec<Coordinate>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn fraction_within(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.within as f64 / self.checked as f64
        }
    }
}

/// Checks the gradient of `f` with respect to every tensor in `inputs`,
/// sampling at most `samples` coordinates per input. Finite differences are
/// taken in the same precision as the analytic pass.
pub fn check_gradients<T, F>(
    name: &str,
    inputs: &[Tensor<T>],
    th: &Thresholds,
    samples: usize,
    seed: u64,
    mut f: F,
) -> Result<GradCheckReport>
where
    T: Real,
    F: FnMut(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_pass(inputs, seed, &mut f)?;
    numeric_pass(name, inputs, analytic, th, samples, seed, &mut f)
}

/// Like [`check_gradients`], but the finite differences evaluate
/// `reference` (the same function built in 64-bit) at the 32-bit point.
pub fn check_against_reference<F, G>(
    name: &str,
    inputs: &[Tensor<f32>],
    th: &Thresholds,
    samples: usize,
    seed: u64,
    mut f: F,
    mut reference: G,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f32>, &[Var]) -> Result<Var>,
    G: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (projection, grads) = analytic_pass(inputs, seed, &mut f)?;
    let wide: Vec<Tensor<f64>> = inputs.iter().map(Tensor::cast).collect();
    let analytic = (projection.cast(), grads.iter().map(Tensor::cast).collect());
    numeric_pass(name, &wide, analytic, th, samples, seed, &mut reference)
}

type Analytic<T> = (Tensor<T>, Vec<Tensor<T>>);

fn projection_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn analytic_pass<T, F>(inputs: &[Tensor<T>], seed: u64, f: &mut F) -> Result<Analytic<T>>
where
    T: Real,
    F: FnMut(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut rng = projection_rng(seed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let projection: Tensor<T> = Tensor::from_fn(tape.shape(out), |_, _, _, _| T::lit(rng.random_range(-1.0..1.0)));
    let grads = tape.backward_seeded(out, projection.clone())?;
    let analytic = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((projection, analytic))
}

fn numeric_pass<U, G>(
    name: &str,
    inputs: &[Tensor<U>],
    (projection, analytic): Analytic<U>,
    th: &Thresholds,
    samples: usize,
    seed: u64,
    f: &mut G,
) -> Result<GradCheckReport>
where
    U: Real,
    G: FnMut(&mut Tape<U>, &[Var]) -> Result<Var>,
{
    let mut eval = |perturbed: &[Tensor<U>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape
            .value(out)
            .data()
            .iter()
            .zip(projection.data())
            .map(|(&o, &r)| o.as_f64() * r.as_f64())
            .sum())
    };

    let mut rng = projection_rng(seed ^ 0x5eed);
    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: 0,
        within: 0,
        max_rel: 0.0,
        failing: Vec::new(),
        passed: false,
    };
    let mut work: Vec<Tensor<U>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if n <= samples {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, samples).into_vec();
            c.sort_unstable();
            c
        };
        for j in coords {
            let x0 = input.data()[j];
            let h = U::lit(th.step);
            work[i].data_mut()[j] = x0 + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = x0;
            // Use the step actually representable in U.
            let step = ((x0 + h).as_f64() - (x0 - h).as_f64()).max(f64::MIN_POSITIVE);
            let numeric = (plus - minus) / step;
            let a = analytic[i].data()[j].as_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(th.floor);
            report.checked += 1;
            report.max_rel = report.max_rel.max(rel);
            if rel <= th.rel_tol {
                report.within += 1;
            } else {
                report.failing.push(Coordinate {
                    input: i,
                    index: j,
                    analytic: a,
                    numeric,
                    rel,
                });
            }
        }
    }
    report.passed = report.fraction_within() >= th.pass_fraction && report.max_rel < th.max_rel.max(th.rel_tol);
    Ok(report)
}

// ---------------------------------------------------------------------------
// Named suite shared by the test suites and the `gradcheck` subcommand.

const SAMPLES: usize = 48;

fn uniform<T: Real>(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_, _, _, _| T::lit(rng.random_range(-1.0..1.0)))
}

/// Distinct values spaced well beyond the finite-difference step, shuffled,
/// so that max-pool windows have no near-ties.
fn spread<T: Real>(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<T> {
    use rand::seq::SliceRandom;
    let n = shape.numel();
    let mut v: Vec<f64> = (0..n).map(|i| -3.0 + 6.0 * i as f64 / n as f64).collect();
    v.shuffle(rng);
    Tensor::from_parts(shape, v.into_iter().map(T::lit).collect())
}

/// Values with magnitude at least 0.1, keeping ReLU away from its kink.
fn off_zero<T: Real>(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let m: f64 = rng.random_range(0.1..1.0);
        T::lit(if rng.random_bool(0.5) { m } else { -m })
    })
}

pub const OP_NAMES: &[&str] = &[
    "conv2d",
    "conv2d-grouped",
    "conv2d-depthwise",
    "conv2d-pointwise",
    "avg_pool2d",
    "max_pool2d",
    "gather-avg-e2",
    "gather-max-e2",
    "nearest_interpolate",
    "sigmoid",
    "relu",
    "hadamard",
    "add",
    "linear",
    "batchnorm2d-train",
    "batchnorm2d-eval",
    "global_avg_pool",
    "softmax_cross_entropy",
    "excite-broadcast",
];

pub const UNIT_NAMES: &[&str] = &[
    "ge-theta-minus-e2",
    "ge-theta-minus-global",
    "ge-theta-e2",
    "ge-theta-global",
    "ge-theta-plus-e2",
    "ge-theta-plus-global",
    "se-global",
];

pub fn all_names() -> Vec<&'static str> {
    OP_NAMES.iter().chain(UNIT_NAMES).copied().collect()
}

type CaseFn<T> = Box<dyn FnMut(&mut Tape<T>, &[Var]) -> Result<Var>>;

fn name_seed(name: &str) -> u64 {
    name.bytes()
        .fold(17u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64))
}

/// Runs one named check. In single precision the analytic gradients are
/// computed in 32-bit and the finite differences in 64-bit.
pub fn run_named(name: &str, precision: Precision) -> Result<GradCheckReport> {
    let seed = name_seed(name);
    let th = precision.thresholds();
    match precision {
        Precision::Single => {
            let (inputs, f) = build_case::<f32>(name, seed)?;
            let (_, reference) = build_case::<f64>(name, seed)?;
            check_against_reference(name, &inputs, &th, SAMPLES, seed, f, reference)
        }
        Precision::Double => {
            let (inputs, f) = build_case::<f64>(name, seed)?;
            check_gradients(name, &inputs, &th, SAMPLES, seed, f)
        }
    }
}

fn build_case<T: Real>(name: &str, seed: u64) -> Result<(Vec<Tensor<T>>, CaseFn<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let s = Shape::new;
    let case: (Vec<Tensor<T>>, CaseFn<T>) = match name {
        "conv2d" => (
            vec![
                uniform(s(2, 3, 5, 5), rng),
                uniform(s(4, 3, 3, 3), rng),
                uniform(s(1, 4, 1, 1), rng),
            ],
            Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::new(1, 1, 1))),
        ),
        "conv2d-grouped" => (
            vec![uniform(s(2, 4, 5, 5), rng), uniform(s(4, 2, 3, 3), rng)],
            Box::new(|t, v| t.conv2d(v[0], v[1], None, Conv2dSpec::new(2, 1, 2))),
        ),
        "conv2d-depthwise" => (
            vec![
                uniform(s(2, 4, 5, 5), rng),
                uniform(s(4, 1, 3, 3), rng),
                uniform(s(1, 4, 1, 1), rng),
            ],
            Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::new(2, 1, 4))),
        ),
        "conv2d-pointwise" => (
            vec![
                uniform(s(2, 4, 3, 3), rng),
                uniform(s(3, 4, 1, 1), rng),
                uniform(s(1, 3, 1, 1), rng),
            ],
            Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::default())),
        ),
        "avg_pool2d" => (
            vec![uniform(s(2, 3, 5, 5), rng)],
            Box::new(|t, v| t.avg_pool2d(v[0], 3, 2, 1)),
        ),
        "max_pool2d" => (
            vec![spread(s(2, 3, 5, 5), rng)],
            Box::new(|t, v| t.max_pool2d(v[0], 3, 2, 1)),
        ),
        "gather-avg-e2" => (
            vec![uniform(s(2, 3, 5, 5), rng)],
            Box::new(|t, v| gather_pool(t, v[0], GatherKind::AvgPool, Extent::Ratio(2))),
        ),
        "gather-max-e2" => (
            vec![spread(s(2, 3, 5, 5), rng)],
            Box::new(|t, v| gather_pool(t, v[0], GatherKind::MaxPool, Extent::Ratio(2))),
        ),
        "nearest_interpolate" => (
            vec![uniform(s(2, 3, 2, 3), rng)],
            Box::new(|t, v| t.nearest_interpolate(v[0], 5, 5)),
        ),
        "sigmoid" => (vec![uniform(s(2, 3, 4, 4), rng)], Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        "relu" => (vec![off_zero(s(2, 3, 4, 4), rng)], Box::new(|t, v| Ok(t.relu(v[0])))),
        "hadamard" => (
            vec![uniform(s(2, 3, 4, 4), rng), uniform(s(2, 3, 4, 4), rng)],
            Box::new(|t, v| t.hadamard(v[0], v[1])),
        ),
        "add" => (
            vec![uniform(s(2, 3, 4, 4), rng), uniform(s(2, 3, 4, 4), rng)],
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        "linear" => (
            vec![
                uniform(s(4, 3, 2, 2), rng),
                uniform(s(5, 12, 1, 1), rng),
                uniform(s(1, 5, 1, 1), rng),
            ],
            Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))),
        ),
        "batchnorm2d-train" => (
            vec![
                uniform(s(3, 3, 4, 4), rng),
                uniform(s(1, 3, 1, 1), rng),
                uniform(s(1, 3, 1, 1), rng),
            ],
            Box::new(|t, v| Ok(t.batchnorm2d(v[0], v[1], v[2], BatchNormMode::Train)?.0)),
        ),
        "batchnorm2d-eval" => {
            let stats = RunningStats {
                mean: vec![T::lit(0.1), T::lit(-0.2), T::lit(0.3)],
                var: vec![T::lit(0.5), T::lit(1.5), T::lit(0.9)],
            };
            (
                vec![
                    uniform(s(2, 3, 4, 4), rng),
                    uniform(s(1, 3, 1, 1), rng),
                    uniform(s(1, 3, 1, 1), rng),
                ],
                Box::new(move |t, v| Ok(t.batchnorm2d(v[0], v[1], v[2], BatchNormMode::Eval(Some(&stats)))?.0)),
            )
        }
        "global_avg_pool" => (
            vec![uniform(s(2, 3, 4, 5), rng)],
            Box::new(|t, v| Ok(t.global_avg_pool(v[0]))),
        ),
        "softmax_cross_entropy" => (
            vec![uniform(s(4, 5, 1, 1), rng)],
            Box::new(|t, v| t.softmax_cross_entropy(v[0], &[3, 0, 4, 1])),
        ),
        // x ⊙ σ(x̂ broadcast to x's plane)
        "excite-broadcast" => (
            vec![uniform(s(2, 3, 4, 4), rng), uniform(s(2, 3, 2, 2), rng)],
            Box::new(|t, v| crate::ge::excite_direct(t, v[0], v[1])),
        ),
        unit => match unit_template(unit) {
            Some(template) => unit_case(unit, template, rng)?,
            None => {
                return Err(Error::Usage(format!(
                    "unknown gradcheck target `{unit}`; known: {}",
                    all_names().join(", ")
                )))
            }
        },
    };
    Ok(case)
}

/// Template behind each unit check name.
pub fn unit_template(name: &str) -> Option<GeTemplate> {
    let r = 2;
    Some(match name {
        "ge-theta-minus-e2" => GeTemplate::theta_minus(Extent::Ratio(2)),
        "ge-theta-minus-global" => GeTemplate::theta_minus(Extent::Global),
        "ge-theta-e2" => GeTemplate::theta(Extent::Ratio(2)),
        "ge-theta-global" => GeTemplate::theta(Extent::Global),
        "ge-theta-plus-e2" => GeTemplate::theta_plus(Extent::Ratio(2), r),
        "ge-theta-plus-global" => GeTemplate::theta_plus(Extent::Global, r),
        "se-global" => GeTemplate::squeeze_excite(r),
        _ => return None,
    })
}

/// Whole unit in training mode (batch-norm on batch statistics), with the
/// input first and then every parameter as a checked input.
fn unit_case<T: Real>(name: &str, template: GeTemplate, rng: &mut ChaCha8Rng) -> Result<(Vec<Tensor<T>>, CaseFn<T>)> {
    let mut store = ParamStore::<T>::new();
    let unit = GeUnit::new(&mut store, rng, name, template.at(4, 5, 5))?;
    // Move off the neutral batch-norm initialisation.
    for p in store.params_mut() {
        for v in p.value.data_mut() {
            *v += T::lit(rng.random_range(-0.3..0.3));
        }
    }
    // A global gather normalises over the batch only, so keep it above two.
    let mut inputs = vec![uniform::<T>(Shape::new(4, 4, 5, 5), rng)];
    inputs.extend(store.params().iter().map(|p| p.value.clone()));
    let ids: Vec<_> = store
        .params()
        .iter()
        .map(|p| store.find_param(&p.name).expect("registered"))
        .collect();
    let f = move |tape: &mut Tape<T>, vars: &[Var]| {
        let mut ctx = Ctx::with_tape(&store, std::mem::take(tape), true);
        for (id, &v) in ids.iter().zip(&vars[1..]) {
            ctx.bind(*id, v);
        }
        let out = unit.forward(&mut ctx, vars[0], GateHook::None)?.out;
        *tape = ctx.into_tape();
        Ok(out)
    };
    Ok((inputs, Box::new(f)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // y = x² but with a tape op whose gradient is x (hadamard with a constant copy).
        let x = Tensor::<f64>::full(Shape::new(1, 1, 1, 3), 1.5);
        let report = check_gradients("wrong", std::slice::from_ref(&x), &Thresholds::DOUBLE, 8, 1, |t, v| {
            let c = t.constant(t.value(v[0]).clone());
            t.hadamard(v[0], c)
        })
        .unwrap();
        assert!(!report.passed);
        assert_eq!(report.failing.len(), 3);
    }

    #[test]
    fn unknown_name_is_usage_error() {
        assert!(matches!(run_named("nope", Precision::Single), Err(Error::Usage(_))));
    }
}
