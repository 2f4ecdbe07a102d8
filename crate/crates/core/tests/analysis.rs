use metanode::analysis::{
    convergence_csv, convergence_curve, evaluate, evaluate_with, gradient_bias, labelled_samples, mean_and_ci95,
    prototype_bias, trajectory, EvalReport, Method, Protocol,
};
use metanode::episodes::{synth_dataset, FeatureDataset, Mode, SynthConfig};
use metanode::gradnet::{GradNetConfig, GradNetParams};
use metanode::numerics::Matrix;
use metanode::odeflow::SolveConfig;
use metanode::protoclassify::{averaged_gradient, init_prototypes, real_prototypes};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn noisy(seed: u64) -> FeatureDataset {
    synth_dataset(&SynthConfig { num_classes: 8, dim: 6, samples_per_class: 20, seed, ..Default::default() }).unwrap()
}

fn noiseless() -> FeatureDataset {
    synth_dataset(&SynthConfig { num_classes: 8, dim: 6, samples_per_class: 20, noise_sigma: 0.0, seed: 2, ..Default::default() })
        .unwrap()
}

fn protocol(episodes: usize) -> Protocol {
    Protocol { n_way: 3, k_shot: 1, m_query: 4, episodes, seed: 5, ..Default::default() }
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

#[test]
fn real_prototypes_on_noiseless_data_are_perfect() {
    let report = evaluate_with(&noiseless(), &protocol(30), "real", real_prototypes).unwrap();
    assert_eq!(report.mean_accuracy, 1.0);
    assert_eq!(report.ci95_halfwidth, 0.0);
    assert_eq!(report.per_episode_accuracies.len(), 30);
    assert_eq!(report.num_episodes, 30);
}

#[test]
fn statistics_match_two_pass_oracle() {
    let report = evaluate(&noisy(1), &protocol(50), &Method::Mean).unwrap();
    let a = &report.per_episode_accuracies;
    let n = a.len() as f64;
    let mut mean = 0.0;
    for v in a {
        mean += v;
    }
    mean /= n;
    let mut ss = 0.0;
    for v in a {
        ss += (v - mean) * (v - mean);
    }
    let half = 1.96 * (ss / (n - 1.0)).sqrt() / n.sqrt();
    assert!((report.mean_accuracy - mean).abs() < 1e-12);
    assert!((report.ci95_halfwidth - half).abs() < 1e-12);
    assert!((0.0..=1.0).contains(&report.mean_accuracy));
    assert!(report.ci95_halfwidth > 0.0);
    // Each episode has 12 queries.
    assert!(a.iter().all(|v| (v * 12.0 - (v * 12.0).round()).abs() < 1e-12));
}

#[test]
fn report_csv_lists_every_episode() {
    let report = evaluate(&noisy(3), &protocol(7), &Method::Gda { eta: 0.1, steps: 3 }).unwrap();
    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 8);
    assert_eq!(csv.lines().next().unwrap(), "episode,accuracy");
    assert_eq!(report.method, "gda");
    assert!(report.summary().contains("episodes: 7"));
    assert!(EvalReport::from_episodes("x", vec![], &[]).is_err());
}

#[test]
fn evaluation_rejects_bad_protocols() {
    let ds = noisy(4);
    assert!(evaluate(&ds, &Protocol { episodes: 0, ..protocol(1) }, &Method::Mean).is_err());
    assert!(evaluate(&ds, &Protocol { m_query: 0, ..protocol(1) }, &Method::Mean).is_err());
    assert!(matches!(
        evaluate(&ds, &Protocol { n_way: 9, ..protocol(1) }, &Method::Mean),
        Err(metanode::Error::Capacity(_))
    ));
}

#[test]
fn prototype_bias_noiseless_is_one() {
    let b = prototype_bias(&noiseless(), &protocol(10), &Method::Mean).unwrap();
    assert!((b.sim_initial - 1.0).abs() < 1e-12);
    assert!((b.sim_optimal - 1.0).abs() < 1e-12);
    assert_eq!(b.episodes, 10);
}

#[test]
fn prototype_bias_matches_cosine_oracle() {
    let ds = noisy(6);
    let p = protocol(10);
    let b = prototype_bias(&ds, &p, &Method::Gda { eta: 0.1, steps: 5 }).unwrap();
    let mut total = 0.0;
    for i in 0..10 {
        let ep = p.episode(&ds, i).unwrap();
        // Class means computed directly from the sampled rows.
        let (all, labels) = labelled_samples(&ep).unwrap();
        let mut sim = 0.0;
        for k in 0..ep.n_way() {
            let mut mean = vec![0.0; ep.dim()];
            let mut count = 0.0;
            for (row, &l) in all.iter_rows().zip(&labels) {
                if l == k {
                    mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
                    count += 1.0;
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            sim += cos(ep.support().row(k), &mean);
        }
        total += sim / ep.n_way() as f64;
    }
    assert!((b.sim_initial - total / 10.0).abs() < 1e-12);
    assert!(b.sim_optimal.is_finite());
}

#[test]
fn gradient_bias_with_whole_class_support() {
    // With no query rows the support is every labelled sample.
    let ds = noisy(7);
    let p = Protocol { m_query: 0, k_shot: 3, ..protocol(12) };
    let g = gradient_bias(&ds, &p, None).unwrap();
    assert!((g.sim_averaged - 1.0).abs() < 1e-12);
    assert_eq!(g.sim_inferred, None);
    assert_eq!(g.episodes + g.excluded, 12);
}

#[test]
fn gradient_bias_matches_cosine_oracle() {
    let ds = noisy(8);
    let p = protocol(6);
    let cfg = GradNetConfig { num_modules: 2, feature_dim: 6, hidden_dim: 8, embed_dim: 8, heads: 2, head_dim: 4, max_ways: 3, ..Default::default() };
    let params = GradNetParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let g = gradient_bias(&ds, &p, Some((&params, &cfg))).unwrap();
    let mut total = 0.0;
    for i in 0..6 {
        let ep = p.episode(&ds, i).unwrap();
        let p0 = init_prototypes(&ep).unwrap();
        let (all, labels) = labelled_samples(&ep).unwrap();
        let real = averaged_gradient(&p0, &all, &labels, p.gamma).unwrap();
        let avg = averaged_gradient(&p0, ep.support(), ep.support_labels(), p.gamma).unwrap();
        total += cos(avg.as_slice(), real.as_slice());
    }
    assert_eq!(g.episodes, 6);
    assert!((g.sim_averaged - total / 6.0).abs() < 1e-12);
    let inferred = g.sim_inferred.unwrap();
    assert!((-1.0..=1.0).contains(&inferred));
}

#[test]
fn convergence_curve_is_paired_and_bounded() {
    let ds = noisy(9);
    let p = protocol(8);
    let cfg = GradNetConfig { num_modules: 1, feature_dim: 6, hidden_dim: 8, embed_dim: 8, heads: 2, head_dim: 4, max_ways: 3, ..Default::default() };
    let params = GradNetParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let solver = SolveConfig { num_steps: 8, ..Default::default() };
    let times = [1.0, 5.0, 10.0, 20.0, 40.0];
    let curve = convergence_curve(&ds, &p, &params, &cfg, &solver, &times).unwrap();
    assert_eq!(curve.len(), 5);
    assert_eq!(curve.iter().map(|c| c.num_steps).collect::<Vec<_>>(), vec![1, 1, 2, 4, 8]);
    for c in &curve {
        assert!((0.0..=1.0).contains(&c.mean_accuracy));
        assert!(c.mean_loss.is_finite());
    }
    // The last point is an ordinary evaluation at the base solver.
    let full = evaluate(&ds, &p, &Method::MetaNode { params: &params, net: &cfg, solver: &solver }).unwrap();
    assert_eq!(curve[4].mean_accuracy, full.mean_accuracy);
    assert_eq!(convergence_csv(&curve).lines().count(), 6);
    assert!(convergence_curve(&ds, &p, &params, &cfg, &solver, &[5.0, 1.0]).is_err());
    assert!(convergence_curve(&ds, &p, &params, &cfg, &solver, &[0.0, 1.0]).is_err());
    assert!(convergence_curve(&ds, &p, &params, &cfg, &solver, &[]).is_err());
}

#[test]
fn trajectory_has_one_state_per_step() {
    let ds = noisy(10);
    let cfg = GradNetConfig { num_modules: 1, feature_dim: 6, hidden_dim: 8, embed_dim: 8, heads: 2, head_dim: 4, max_ways: 3, ..Default::default() };
    let params = GradNetParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let solver = SolveConfig { num_steps: 4, ..Default::default() };
    let p = protocol(3);
    let traj = trajectory(&ds, &p, 2, &params, &cfg, &solver).unwrap();
    assert_eq!(traj.states.len(), 5);
    let p0 = init_prototypes(&p.episode(&ds, 2).unwrap()).unwrap().prototypes;
    assert_eq!(traj.states[0], p0);
    assert_eq!(*traj.times.last().unwrap(), 40.0);
}

#[test]
fn evaluation_is_deterministic_across_thread_counts() {
    let ds = noisy(11);
    let p = Protocol { mode: Mode::Inductive, ..protocol(20) };
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = one.install(|| evaluate(&ds, &p, &Method::Gda { eta: 0.05, steps: 4 })).unwrap();
    let b = four.install(|| evaluate(&ds, &p, &Method::Gda { eta: 0.05, steps: 4 })).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ci_is_nonnegative_and_mean_bounded(values in prop::collection::vec(0.0f64..=1.0, 1..50)) {
        let (mean, half) = mean_and_ci95(&values);
        prop_assert!(half >= 0.0);
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(mean >= lo - 1e-12 && mean <= hi + 1e-12);
    }

    #[test]
    fn report_invariants_hold(seed in 0u64..1000, episodes in 1usize..6) {
        let ds = noisy(12);
        let p = Protocol { seed, episodes, ..protocol(1) };
        let r = evaluate(&ds, &p, &Method::Mean).unwrap();
        prop_assert_eq!(r.per_episode_accuracies.len(), r.num_episodes);
        prop_assert!((0.0..=1.0).contains(&r.mean_accuracy));
        prop_assert!(r.ci95_halfwidth >= 0.0);
    }
}

#[test]
fn labelled_samples_stacks_support_then_query() {
    let ds = noisy(13);
    let ep = protocol(1).episode(&ds, 0).unwrap();
    let (all, labels) = labelled_samples(&ep).unwrap();
    assert_eq!(all.rows(), 3 + 12);
    assert_eq!(&labels[..3], ep.support_labels());
    assert_eq!(all.row(3), ep.query().row(0));
    let _: &Matrix = &all;
}
