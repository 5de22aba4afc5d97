use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{simulate_population, vectorize_upper, SimulationParams};
use crate::models::ModelError;
use crate::topology::eigenvector;

fn col(values: &[f64]) -> Matrix {
    Matrix::column(values)
}

#[test]
fn adversarial_loss_cases() {
    let tape = Tape::new();
    let zero = tape.constant(Matrix::zeros(3, 1));
    assert_eq!(adversarial_loss(zero, &[zero, zero]).unwrap().item(), 0.0);
    let ones = tape.constant(Matrix::filled(3, 1, 1.0));
    assert_eq!(adversarial_loss(ones, &[zero]).unwrap().item(), -1.0);
    assert!(adversarial_loss(ones, &[]).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut draw = || (0..4).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
    let (real, f1, f2) = (draw(), draw(), draw());
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let expected = -mean(&real) + 0.5 * (mean(&f1) + mean(&f2));
    let got = adversarial_loss(
        tape.constant(col(&real)),
        &[tape.constant(col(&f1)), tape.constant(col(&f2))],
    )
    .unwrap()
    .item();
    assert!((got - expected).abs() < 1e-12);
}

#[test]
fn domain_classification_cases() {
    let tape = Tape::new();
    let zeros = tape.constant(Matrix::zeros(4, 1));
    let ones = tape.constant(Matrix::filled(4, 1, 1.0));
    assert_eq!(domain_classification_loss(&[zeros], &[ones]).unwrap().item(), 0.0);
    let half = tape.constant(Matrix::scalar(0.5));
    assert_eq!(domain_classification_loss(&[half], &[half]).unwrap().item(), 0.5);
    assert!(matches!(
        domain_classification_loss(&[zeros, zeros], &[ones]),
        Err(TrainingError::Dimension(_))
    ));
    assert!(domain_classification_loss(&[zeros], &[half]).is_err());
}

#[test]
fn info_max_cases() {
    let tape = Tape::new();
    let half = tape.constant(Matrix::scalar(0.5));
    assert!((info_max_loss(&[half]).unwrap().item() - std::f64::consts::LN_2).abs() < 1e-15);
    let sure = tape.constant(Matrix::scalar(1.0));
    assert!(info_max_loss(&[sure]).unwrap().item() < 1e-6);
    let mut last = f64::INFINITY;
    for p in [0.0, 0.1, 0.4, 0.7, 0.99] {
        let v = info_max_loss(&[tape.constant(Matrix::scalar(p))]).unwrap().item();
        assert!(v.is_finite() && v < last);
        last = v;
    }
}

#[test]
fn weighted_totals() {
    let tape = Tape::new();
    let w = LossWeights::for_targets(1);
    let d = DiscriminatorParts {
        adversarial: tape.scalar(1.0),
        gradient_penalty: tape.scalar(2.0),
        domain_classification: tape.scalar(3.0),
    };
    assert!((discriminator_loss(&[d], &w).unwrap().item() - 4.2).abs() < 1e-12);
    let g = GeneratorParts {
        adversarial: tape.scalar(-0.5),
        topology: tape.scalar(2.0),
        info_max: tape.scalar(0.7),
    };
    assert!((generator_loss(&[g], &w).unwrap().item() - 0.4).abs() < 1e-12);

    let zero = LossWeights {
        lambda_gdc: 0.0,
        lambda_gp: 0.0,
        lambda_top: 0.0,
        lambda_inf: 0.0,
        sigma_gp: 1.0,
    };
    assert_eq!(discriminator_loss(&[d, d], &zero).unwrap().item(), 2.0);
    assert_eq!(generator_loss(&[g], &zero).unwrap().item(), -0.5);
    assert!(discriminator_loss(&[], &w).is_err());
}

#[test]
fn feature_mae_hand_case() {
    let tape = Tape::new();
    let pred = tape.param(Matrix::from_rows(&[[1.0, 1.0]]));
    let v = feature_mae(&Matrix::from_rows(&[[0.0, 1.0]]), pred).unwrap();
    assert_eq!(v.item(), 0.5);
}

fn random_graph_features(b: usize, r: usize, rng: &mut impl Rng) -> Matrix {
    let f = r * (r - 1) / 2;
    let data = (0..b * f).map(|_| rng.random_range(0.1..1.0)).collect();
    Matrix::from_vec(b, f, data).unwrap()
}

fn targets_for(features: &Matrix, r: usize, settings: &TopologySettings) -> TopologyTarget {
    let mut centralities = Matrix::zeros(features.rows(), r);
    for a in 0..features.rows() {
        let g = devectorize(features.row(a), r).unwrap();
        let scores = settings.mode.compute(&g, settings.interp).unwrap();
        centralities.row_mut(a).copy_from_slice(&scores.values);
    }
    TopologyTarget {
        features: features.clone(),
        centralities,
    }
}

fn settings(mode: CentralityMetric, r: usize) -> TopologySettings {
    TopologySettings {
        mode,
        rois: r,
        interp: DistanceInterpretation::default(),
        eigen_iters: 50,
    }
}

#[test]
fn topology_loss_vanishes_on_exact_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r = 6;
    let real = random_graph_features(3, r, &mut rng);
    for mode in [CentralityMetric::Eigenvector, CentralityMetric::Betweenness, CentralityMetric::Closeness] {
        let s = settings(mode, r);
        let tape = Tape::new();
        let pred = tape.param(real.clone());
        let loss = topological_loss(&[targets_for(&real, r, &s)], &[pred], &s).unwrap();
        assert!(loss.item().abs() < 1e-9, "{mode}: {}", loss.item());
    }
    let bad = settings(CentralityMetric::PageRank, r);
    let tape = Tape::new();
    assert!(topological_loss(&[], &[tape.param(real.clone())], &bad).is_err());
}

#[test]
fn eigenvector_topology_loss_decreases_toward_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r = 7;
    let real = random_graph_features(4, r, &mut rng);
    let start = random_graph_features(4, r, &mut rng);
    let s = settings(CentralityMetric::Eigenvector, r);
    let target = targets_for(&real, r, &s);
    let mut last = f64::INFINITY;
    for step in 0..=10 {
        let t = 1.0 - step as f64 / 10.0;
        let pred = real.zip_map(&start, |a, b| a + t * (b - a));
        let tape = Tape::new();
        let v = topological_loss(&[target.clone()], &[tape.param(pred)], &s).unwrap().item();
        assert!(v < last, "t = {t}");
        last = v;
    }
    assert!(last < 1e-9);
}

#[test]
fn eigenvector_topology_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let r = 5;
    let real = random_graph_features(2, r, &mut rng);
    let pred = random_graph_features(2, r, &mut rng);
    let s = settings(CentralityMetric::Eigenvector, r);
    let target = targets_for(&real, r, &s);
    let value = |m: &Matrix| {
        let tape = Tape::new();
        topological_loss(&[target.clone()], &[tape.param(m.clone())], &s).unwrap().item()
    };
    let tape = Tape::new();
    let p = tape.param(pred.clone());
    let loss = topological_loss(&[target.clone()], &[p], &s).unwrap();
    let grad = tape.backward(loss).unwrap().get(p).unwrap().clone();
    let h = 1e-6;
    for i in 0..pred.len() {
        let mut up = pred.clone();
        up.as_mut_slice()[i] += h;
        let mut down = pred.clone();
        down.as_mut_slice()[i] -= h;
        let fd = (value(&up) - value(&down)) / (2.0 * h);
        let g = grad.as_slice()[i];
        assert!((fd - g).abs() <= 1e-6 + 1e-4 * g.abs(), "entry {i}: fd {fd} vs {g}");
    }
}

struct ConstantCritic;

impl<'t> Critic<'t> for ConstantCritic {
    fn critic(&self, features: Var<'t>, _norm_a: Var<'t>) -> std::result::Result<Var<'t>, ModelError> {
        Ok(features.tape().constant(Matrix::filled(features.rows(), 1, 3.0)))
    }
}

struct LinearCritic<'t> {
    w: Var<'t>,
}

impl<'t> Critic<'t> for LinearCritic<'t> {
    fn critic(&self, features: Var<'t>, _norm_a: Var<'t>) -> std::result::Result<Var<'t>, ModelError> {
        Ok(features.matmul(self.w)?)
    }
}

fn linear_weights(f: usize, norm: f64, rng: &mut impl Rng) -> Matrix {
    let raw: Vec<f64> = (0..f).map(|_| rng.random_range(-1.0..1.0)).collect();
    let len = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    Matrix::column(&raw.iter().map(|x| x * norm / len).collect::<Vec<_>>())
}

fn penalty_with(critic_norm: Option<f64>, sigma: f64, f: usize, rows: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = Matrix::from_vec(rows, f, (0..rows * f).map(|_| rng.random::<f64>()).collect()).unwrap();
    let fake = source.map(|x| 1.0 - x);
    let tape = Tape::new();
    let norm_a = tape.constant(Matrix::identity(rows));
    let value = match critic_norm {
        None => gradient_penalty(&ConstantCritic, &tape, &source, &[fake], norm_a, sigma, ProbeSettings::default(), &mut rng),
        Some(n) => {
            let w = tape.param(linear_weights(f, n, &mut rng));
            gradient_penalty(&LinearCritic { w }, &tape, &source, &[fake], norm_a, sigma, ProbeSettings::default(), &mut rng)
        }
    };
    value.unwrap().item()
}

#[test]
fn penalty_is_zero_below_threshold() {
    assert_eq!(penalty_with(None, 1.0, 10, 20, 0), 0.0);
    for seed in 0..5 {
        assert_eq!(penalty_with(Some(0.5), 1.0, 10, 50, seed), 0.0);
        assert_eq!(penalty_with(Some(0.8 * 5.0), 5.0, 30, 50, seed), 0.0);
    }
    // With no more features than probes the estimate is exact.
    assert_eq!(penalty_with(Some(1.99), 2.0, 3, 10, 1), 0.0);
}

#[test]
fn penalty_of_steep_linear_critic_is_about_one() {
    for seed in 0..3 {
        let v = penalty_with(Some(2.0), 1.0, 10, 400, seed);
        assert!((v - 1.0).abs() < 0.1, "seed {seed}: {v}");
    }
    let exact = penalty_with(Some(3.0), 2.0, 4, 10, 0);
    assert!((exact - 1.0).abs() < 1e-6, "{exact}");
}

#[test]
fn penalty_rejects_bad_sigma() {
    let tape = Tape::new();
    let m = Matrix::zeros(2, 3);
    let a = tape.constant(Matrix::identity(2));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = gradient_penalty(&ConstantCritic, &tape, &m, &[m.clone()], a, 0.0, ProbeSettings::default(), &mut rng);
    assert!(matches!(r, Err(TrainingError::Precondition(_))));
}

#[test]
fn probe_estimate_is_unbiased() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (f, q) = (30, 4);
    let g: Vec<f64> = (0..f).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    let trials = 20_000;
    let mut total = 0.0;
    for _ in 0..trials {
        let dirs = losses_probe_directions(f, q, &mut rng);
        let ss: f64 = dirs
            .iter()
            .map(|u| u.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>().powi(2))
            .sum();
        total += (ss * f as f64 / q as f64).sqrt() / probe_debias(f, q);
    }
    let mean = total / trials as f64;
    assert!((mean / norm - 1.0).abs() < 0.01, "{mean} vs {norm}");
    assert_eq!(probe_debias(3, 4), 1.0);
}

fn losses_probe_directions(f: usize, q: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    // Independent Gram-Schmidt frame for the oracle.
    let mut frame: Vec<Vec<f64>> = Vec::new();
    while frame.len() < q {
        let mut u: Vec<f64> = (0..f).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        for p in &frame {
            let d: f64 = u.iter().zip(p).map(|(a, b)| a * b).sum();
            u.iter_mut().zip(p).for_each(|(a, b)| *a -= d * b);
        }
        let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        frame.push(u.into_iter().map(|x| x / n).collect());
    }
    frame
}

fn small_population(seed: u64) -> PopulationDataset {
    simulate_population(&SimulationParams {
        subjects: 24,
        rois: 6,
        views: 3,
        clusters: 2,
        seed,
        ..SimulationParams::default()
    })
    .unwrap()
    .dataset
}

fn quick_config(seed: u64) -> TrainingConfig {
    TrainingConfig {
        iterations: 3,
        batch_size: 8,
        n_critic: 2,
        seed,
        ..TrainingConfig::default()
    }
}

#[test]
fn training_runs_and_is_deterministic() {
    let data = small_population(1);
    let w = LossWeights::for_targets(2);
    let (a, trace) = train(&data, 0, &quick_config(5), &w).unwrap();
    let (b, _) = train(&data, 0, &quick_config(5), &w).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(trace.records.len(), 3);
    assert_eq!(trace.clusters.len(), 24);
    assert!(trace.to_csv().starts_with("iteration,L_D,L_adv,L_gp,L_gdc,L_G,L_top,L_inf"));
    for r in &trace.records {
        assert!(r.l_gp >= 0.0 && r.l_gdc >= 0.0 && r.l_top >= 0.0 && r.l_inf >= 0.0);
    }
    let (c, _) = train(&data, 0, &quick_config(6), &w).unwrap();
    assert_ne!(a, c);
}

#[test]
fn training_preconditions() {
    let data = small_population(1);
    let w = LossWeights::for_targets(2);
    let mut cfg = quick_config(0);
    cfg.batch_size = 1;
    assert!(train(&data, 0, &cfg, &w).is_err());
    assert!(train(&data, 3, &quick_config(0), &w).is_err());
    let mut cfg = quick_config(0);
    cfg.clusters = 13;
    assert!(matches!(train(&data, 0, &cfg, &w), Err(TrainingError::Precondition(_))));
    let mut cfg = quick_config(0);
    cfg.gp_mode = GpMode::Exact;
    assert!(train(&data, 0, &cfg, &w).is_err());
    let mut cfg = quick_config(0);
    cfg.centrality = CentralityMetric::PageRank;
    assert!(train(&data, 0, &cfg, &w).is_err());
}

#[test]
fn ablated_weights_still_train() {
    let data = small_population(2);
    let w = LossWeights {
        lambda_gdc: 0.0,
        lambda_gp: 0.0,
        lambda_top: 0.0,
        lambda_inf: 0.0,
        sigma_gp: 2.0,
    };
    let mut cfg = quick_config(1);
    cfg.centrality = CentralityMetric::Betweenness;
    let (_, trace) = train(&data, 1, &cfg, &w).unwrap();
    assert_eq!(trace.records.len(), 3);
}

fn fixed_clusters(data: &PopulationDataset, cfg: &TrainingConfig, targets: &[usize]) -> Vec<ClusterData> {
    let labels: Vec<usize> = (0..data.num_subjects()).map(|i| i % 2).collect();
    let assignment = ClusterAssignment {
        labels,
        centroids: Matrix::zeros(2, 1),
        c: 2,
    };
    let features: Vec<Matrix> = (0..data.num_views()).map(|p| data.feature_matrix(p)).collect();
    prepare_clusters(data, &features, &assignment, targets, cfg).unwrap()
}

#[test]
fn steps_update_only_their_own_parameters() {
    let data = small_population(3);
    let cfg = quick_config(2);
    let w = LossWeights::for_targets(2);
    let mut bundle = ModelBundle::init(ModelDims::new(6, 3, 2), 0, w, 2).unwrap();
    let targets = bundle.target_views();
    let clusters = fixed_clusters(&data, &cfg, &targets);
    let features: Vec<Matrix> = (0..3).map(|p| data.feature_matrix(p)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let before = bundle.clone();
    let mut disc_adam = Adam::new(bundle.discriminator.layers().into_iter().map(|l| &l.weight), cfg.adam);
    critic_step(&mut bundle, &mut disc_adam, &clusters, &features, &targets, &cfg, &w, &mut rng).unwrap();
    assert_eq!(bundle.encoder, before.encoder);
    assert_eq!(bundle.generators, before.generators);
    for (new, old) in bundle.discriminator.layers().iter().zip(before.discriminator.layers()) {
        assert_ne!(new.weight, old.weight);
    }

    let before = bundle.clone();
    let mut gen_adam = Adam::new(generator_side(&bundle).iter().map(|m| &**m), cfg.adam);
    let topo = cfg.topology(6);
    generator_step(&mut bundle, &mut gen_adam, &clusters, &features, &targets, &cfg, &topo, &mut rng).unwrap();
    assert_eq!(bundle.discriminator, before.discriminator);
    for (new, old) in generator_side(&bundle).into_iter().zip(generator_side(&before)) {
        assert_ne!(new, old);
    }
}

#[test]
fn single_cluster_prediction_is_the_generator_output() {
    let data = small_population(4);
    let mut cfg = quick_config(3);
    cfg.clusters = 1;
    let (bundle, _) = train(&data, 0, &cfg, &LossWeights::for_targets(2)).unwrap();
    let source = data.feature_matrix(0);
    let pred = predict_multigraph(&bundle, &source, &cfg.mkml).unwrap();

    let norm = normalize_adjacency(&learn_affinity(&source, &cfg.mkml).unwrap().affinity);
    let tape = Tape::new();
    let a = tape.constant(norm.matrix().clone());
    let z = bundle.encoder.bind(&tape, false).encode(tape.constant(source.clone()), a).unwrap();
    for t in 0..2 {
        let direct = bundle.generators[0][t].bind(&tape, false).generate(z, a).unwrap().value();
        assert_eq!(&*direct, &pred.features[t]);
    }
}

#[test]
fn prediction_structure_and_permutation() {
    let data = small_population(5);
    let cfg = quick_config(4);
    let (bundle, _) = train(&data, 0, &cfg, &LossWeights::for_targets(2)).unwrap();
    let source = data.feature_matrix(0);
    let pred = predict_multigraph(&bundle, &source, &cfg.mkml).unwrap();
    assert_eq!(pred.graphs.len(), 24);
    assert_eq!(pred.target_views, vec![1, 2]);
    for subject in &pred.graphs {
        assert_eq!(subject.len(), 2);
        for g in subject {
            let w = g.weights();
            assert!(w.is_symmetric(0.0));
            assert!((0..6).all(|i| w.get(i, i) == 0.0));
            assert!(w.as_slice().iter().all(|&x| x >= 0.0));
        }
    }

    let perm: Vec<usize> = (0..24).rev().collect();
    let permuted = predict_multigraph(&bundle, &source.select_rows(&perm), &cfg.mkml).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        for t in 0..2 {
            let a = vectorize_upper(&permuted.graphs[i][t]);
            let b = vectorize_upper(&pred.graphs[p][t]);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    assert!(matches!(
        predict_multigraph(&bundle, &Matrix::zeros(3, 4), &cfg.mkml),
        Err(TrainingError::Dimension(_))
    ));
}

#[test]
fn eigenvector_targets_match_power_iteration() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let real = random_graph_features(1, 6, &mut rng);
    let g = devectorize(real.row(0), 6).unwrap();
    let exact = eigenvector(&g).unwrap().values;
    let tape = Tape::new();
    let index: std::rc::Rc<[Option<usize>]> = crate::data::devectorize_index(6).into();
    let gv = crate::topology::graph_from_feature_row(tape.param(real.clone()), 6, &index).unwrap();
    let approx = crate::topology::differentiable_eigenvector(gv, 50).unwrap().value();
    for (a, b) in approx.as_slice().iter().zip(&exact) {
        assert!((a - b).abs() < 1e-4);
    }
}
