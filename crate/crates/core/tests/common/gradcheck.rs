//! Central finite-difference checks of tape gradients.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;
use tmgp::affinity::normalize_matrix;
use tmgp::autodiff::{Tape, Var};
use tmgp::models::{
    Activation, BoundDiscriminator, BoundEncoder, BoundGenerator, BoundLayer, Discriminator, Encoder, GcnLayer, Generator,
};
use tmgp::Matrix;

pub const STEP: f64 = 1e-5;
pub const CASES: u64 = 50;

pub type Graph = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>>;

#[derive(Clone, Copy)]
pub enum Domain {
    /// Values in `(-2, 2)` kept at least `0.05` away from zero.
    AwayFromZero,
    Positive,
    /// Like `AwayFromZero`, also away from `±1`.
    AwayFromUnit,
}

pub struct Case {
    pub name: &'static str,
    pub shapes: Vec<(usize, usize)>,
    pub domain: Domain,
    pub graph: Graph,
}

fn sample(rng: &mut ChaCha8Rng, domain: Domain) -> f64 {
    loop {
        let x: f64 = match domain {
            Domain::Positive => rng.random_range(0.2..2.0),
            _ => rng.random_range(-2.0..2.0),
        };
        let ok = match domain {
            Domain::Positive => true,
            Domain::AwayFromZero => x.abs() > 0.05,
            Domain::AwayFromUnit => x.abs() > 0.05 && (x.abs() - 1.0).abs() > 0.05,
        };
        if ok {
            return x;
        }
    }
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, domain: Domain) -> Matrix {
    let data = (0..rows * cols).map(|_| sample(rng, domain)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Scalarizes `graph` as `Σ weights ⊙ graph(inputs)`.
fn evaluate(graph: &Graph, inputs: &[Matrix], weights: &Matrix) -> f64 {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|m| tape.constant(m.clone())).collect();
    let out = graph(&tape, &vars);
    out.value().zip_map(weights, |a, b| a * b).sum()
}

/// Largest relative error `‖analytic - numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-3)`
/// over all inputs of `graph`.
pub fn max_relative_error(graph: &Graph, inputs: &[Matrix], rng: &mut ChaCha8Rng) -> f64 {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let out = graph(&tape, &vars);
    let weights = random_matrix(rng, out.rows(), out.cols(), Domain::AwayFromZero);
    let loss = out.mul(tape.constant(weights.clone())).unwrap().sum().unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).unwrap();
        let mut numeric = Matrix::zeros(input.rows(), input.cols());
        let mut shifted = inputs.to_vec();
        for k in 0..input.len() {
            let x = input.as_slice()[k];
            shifted[i].as_mut_slice()[k] = x + STEP;
            let up = evaluate(graph, &shifted, &weights);
            shifted[i].as_mut_slice()[k] = x - STEP;
            let down = evaluate(graph, &shifted, &weights);
            shifted[i].as_mut_slice()[k] = x;
            numeric.as_mut_slice()[k] = (up - down) / (2.0 * STEP);
        }
        let diff = analytic.zip_map(&numeric, |a, b| a - b).frobenius_norm();
        let scale = analytic.frobenius_norm().max(numeric.frobenius_norm()).max(1e-3);
        worst = worst.max(diff / scale);
    }
    worst
}

/// Worst error of `case` over [`CASES`] random draws.
pub fn check_case(case: &Case, seed: u64) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000).wrapping_add(k));
        let inputs: Vec<_> = case
            .shapes
            .iter()
            .map(|&(r, c)| random_matrix(&mut rng, r, c, case.domain))
            .collect();
        worst = worst.max(max_relative_error(&case.graph, &inputs, &mut rng));
    }
    worst
}

fn case(name: &'static str, shapes: &[(usize, usize)], domain: Domain, graph: Graph) -> Case {
    Case {
        name,
        shapes: shapes.to_vec(),
        domain,
        graph,
    }
}

/// One case per differentiable tape primitive.
pub fn primitive_cases() -> Vec<Case> {
    use Domain::*;
    let gather_index: Rc<[Option<usize>]> = [Some(5), None, Some(0), Some(5), Some(2), None, Some(7), Some(1)].into();
    vec![
        case("matmul", &[(3, 4), (4, 2)], AwayFromZero, Box::new(|_, v| v[0].matmul(v[1]).unwrap())),
        case("add", &[(3, 4), (3, 4)], AwayFromZero, Box::new(|_, v| v[0].add(v[1]).unwrap())),
        case("sub", &[(3, 4), (3, 4)], AwayFromZero, Box::new(|_, v| v[0].sub(v[1]).unwrap())),
        case("mul", &[(3, 4), (3, 4)], AwayFromZero, Box::new(|_, v| v[0].mul(v[1]).unwrap())),
        case("scale", &[(3, 4)], AwayFromZero, Box::new(|_, v| v[0].scale(-1.7))),
        case("add_scalar", &[(3, 4)], AwayFromZero, Box::new(|_, v| v[0].add_scalar(0.3))),
        case("relu", &[(3, 4)], AwayFromZero, Box::new(|_, v| v[0].relu())),
        case("sigmoid", &[(3, 4)], AwayFromZero, Box::new(|_, v| v[0].sigmoid())),
        case("abs", &[(3, 4)], AwayFromZero, Box::new(|_, v| v[0].abs())),
        case("ln", &[(3, 4)], Positive, Box::new(|_, v| v[0].ln())),
        case("sqrt", &[(3, 4)], Positive, Box::new(|_, v| v[0].sqrt())),
        case("clamp", &[(3, 4)], AwayFromUnit, Box::new(|_, v| v[0].clamp(-1.0, 1.0))),
        case("transpose", &[(3, 4)], AwayFromZero, Box::new(|_, v| v[0].transpose())),
        case("sum", &[(3, 4)], AwayFromZero, Box::new(|_, v| v[0].sum().unwrap())),
        case("mean", &[(3, 4)], AwayFromZero, Box::new(|_, v| v[0].mean().unwrap())),
        case("row_l2_norms", &[(3, 4)], AwayFromZero, Box::new(|_, v| v[0].row_l2_norms().unwrap())),
        case("normalize", &[(3, 4)], AwayFromZero, Box::new(|_, v| v[0].normalize().unwrap())),
        case(
            "gather",
            &[(2, 4)],
            AwayFromZero,
            Box::new(move |_, v| v[0].gather(2, 4, gather_index.clone()).unwrap()),
        ),
        case("slice_rows", &[(4, 3)], AwayFromZero, Box::new(|_, v| v[0].slice_rows(1, 2).unwrap())),
    ]
}

const SUBJECTS: usize = 5;
const FEATURES: usize = 6;
const EMBED: usize = 3;

fn adjacency(seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xad_1ace);
    let mut m = Matrix::identity(SUBJECTS);
    for a in 0..SUBJECTS {
        for b in a + 1..SUBJECTS {
            let x = rng.random_range(0.0..1.0);
            m.set(a, b, x);
            m.set(b, a, x);
        }
    }
    normalize_matrix(&m).unwrap().matrix().clone()
}

fn layer<'t>(weight: Var<'t>, template: &GcnLayer) -> BoundLayer<'t> {
    BoundLayer {
        weight,
        activation: template.activation,
    }
}

/// Inputs are `[features, W1, W2, ...]` for the named network.
pub struct NetworkCase {
    pub name: &'static str,
    pub inputs: Vec<Matrix>,
    pub graph: Graph,
}

/// Smallest `|pre-activation|` over the ReLU layers of a trunk.
fn relu_margin(features: &Matrix, trunk: &[&GcnLayer], norm_a: &Matrix) -> f64 {
    let mut h = features.clone();
    let mut margin = f64::INFINITY;
    for layer in trunk {
        let pre = norm_a.matmul(&h.matmul(&layer.weight));
        if layer.activation == Activation::Relu {
            margin = margin.min(pre.as_slice().iter().map(|x| x.abs()).fold(f64::INFINITY, f64::min));
        }
        h = match layer.activation {
            Activation::Relu => pre.map(|x| x.max(0.0)),
            Activation::Linear => pre,
            Activation::Sigmoid => pre.map(tmgp::autodiff::sigmoid),
        };
    }
    margin
}

/// Finite differences straddling a ReLU kink are meaningless, so draws with a
/// pre-activation closer than this to zero are replaced.
const KINK_MARGIN: f64 = 1e-4;

pub fn network_case(name: &'static str, seed: u64) -> NetworkCase {
    for attempt in 0u64.. {
        let case = draw_network(name, seed.wrapping_add(attempt << 32));
        if case.margin >= KINK_MARGIN {
            return case.case;
        }
    }
    unreachable!()
}

struct Drawn {
    case: NetworkCase,
    margin: f64,
}

fn draw_network(name: &'static str, seed: u64) -> Drawn {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let norm_a = adjacency(seed);
    match name {
        "encoder" => {
            let enc = Encoder::init(FEATURES, EMBED, &mut rng);
            let features = random_matrix(&mut rng, SUBJECTS, FEATURES, Domain::AwayFromZero);
            let margin = relu_margin(&features, &[&enc.layer1, &enc.layer2], &norm_a);
            let case = NetworkCase {
                name,
                inputs: vec![features, enc.layer1.weight.clone(), enc.layer2.weight.clone()],
                graph: Box::new(move |tape, v| {
                    let bound = BoundEncoder {
                        layer1: layer(v[1], &enc.layer1),
                        layer2: layer(v[2], &enc.layer2),
                    };
                    bound.encode(v[0], tape.constant(norm_a.clone())).unwrap()
                }),
            };
            Drawn { case, margin }
        }
        "generator" => {
            let gen = Generator::init(EMBED, FEATURES, &mut rng);
            let z = random_matrix(&mut rng, SUBJECTS, EMBED, Domain::AwayFromZero);
            let margin = relu_margin(&z, &[&gen.layer1, &gen.layer2], &norm_a);
            let case = NetworkCase {
                name,
                inputs: vec![z, gen.layer1.weight.clone(), gen.layer2.weight.clone()],
                graph: Box::new(move |tape, v| {
                    let bound = BoundGenerator {
                        layer1: layer(v[1], &gen.layer1),
                        layer2: layer(v[2], &gen.layer2),
                    };
                    bound.generate(v[0], tape.constant(norm_a.clone())).unwrap()
                }),
            };
            Drawn { case, margin }
        }
        "discriminator" => {
            let disc = Discriminator::init(FEATURES, &mut rng);
            let features = random_matrix(&mut rng, SUBJECTS, FEATURES, Domain::AwayFromZero);
            let margin = relu_margin(&features, &[&disc.layer1, &disc.layer2], &norm_a);
            let case = NetworkCase {
                name,
                inputs: vec![
                    features,
                    disc.layer1.weight.clone(),
                    disc.layer2.weight.clone(),
                    disc.critic.weight.clone(),
                    disc.classifier.weight.clone(),
                ],
                graph: Box::new(move |tape, v| {
                    let bound = BoundDiscriminator {
                        layer1: layer(v[1], &disc.layer1),
                        layer2: layer(v[2], &disc.layer2),
                        critic: layer(v[3], &disc.critic),
                        classifier: layer(v[4], &disc.classifier),
                    };
                    let (critic, probs) = bound.discriminate(v[0], tape.constant(norm_a.clone())).unwrap();
                    // Both heads in one output so the check covers the shared trunk twice.
                    critic.add(probs.scale(3.0)).unwrap()
                }),
            };
            Drawn { case, margin }
        }
        other => panic!("unknown network {other}"),
    }
}

pub const NETWORKS: [&str; 3] = ["encoder", "generator", "discriminator"];

/// Worst error of one network over [`CASES`] random initializations.
pub fn check_network(name: &'static str) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..CASES {
        let net = network_case(name, k);
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e37 + k);
        worst = worst.max(max_relative_error(&net.graph, &net.inputs, &mut rng));
    }
    worst
}
