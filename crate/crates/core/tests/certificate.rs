mod common;

use common::{uniform, DiagQuadratic};
use onda_core::certgen::{generate_blocking, CertConfig, CertProblem, Support};
use onda_core::model::QuadraticModel;
use onda_core::par::ExecPolicy;
use onda_core::transport::w1_distance;
use proptest::prelude::*;

const EPS1: f64 = 1e-6;

fn instance(max_n: usize) -> impl Strategy<Value = (DiagQuadratic, Vec<f64>, Vec<Vec<f64>>, f64)> {
    (1..=2usize, 1..=3usize, 1..=max_n).prop_flat_map(|(d, m, n)| {
        (
            prop::collection::vec(-1.0..1.0f64, d * d),
            prop::collection::vec(-2.0..2.0f64, d * m),
            prop::collection::vec(-3.0..-0.2f64, m),
            prop::collection::vec(-3.0..3.0f64, d),
            prop::collection::vec(prop::collection::vec(-4.0..4.0f64, m), n),
            0.01..2.0f64,
        )
            .prop_map(move |(g, b, c, x, atoms, eps)| {
                // A = GᵀG
                let mut a = vec![0.0; d * d];
                for i in 0..d {
                    for k in 0..d {
                        a[i * d + k] = (0..d).map(|r| g[r * d + i] * g[r * d + k]).sum();
                    }
                }
                (DiagQuadratic { d, m, a, b, c }, x, atoms, eps)
            })
    })
}

fn model(q: &DiagQuadratic) -> QuadraticModel {
    QuadraticModel::from_rows(q.d, q.m, &q.a, &q.b, &q.c_matrix()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matches_the_water_filling_oracle((q, x, atoms, eps) in instance(4), parallel in any::<bool>()) {
        let model = model(&q);
        let support = Support::from_points(&atoms).unwrap();
        let policy = if parallel { ExecPolicy::Parallel } else { ExecPolicy::Sequential };
        let problem = CertProblem { model: &model, x: &x, support: &support, radius: eps, policy };
        let cert = generate_blocking(&problem, &CertConfig::new(EPS1), None).unwrap();
        let (oracle, _) = q.worst_case(&x, &atoms, eps);
        prop_assert!(cert.j_eps1 <= oracle + 1e-9, "{} above the optimum {}", cert.j_eps1, oracle);
        prop_assert!(oracle - cert.j_eps1 <= EPS1 + 1e-9, "{} vs {}", cert.j_eps1, oracle);
        prop_assert!(cert.eta <= EPS1);
    }

    #[test]
    fn budget_equals_transport_distance((q, x, atoms, eps) in instance(6)) {
        let model = model(&q);
        let support = Support::from_points(&atoms).unwrap();
        let problem = CertProblem { model: &model, x: &x, support: &support, radius: eps, policy: ExecPolicy::Sequential };
        // equality needs a tight solve: atoms sharing a target may cross by the tolerance
        let cert = generate_blocking(&problem, &CertConfig::new(1e-9), None).unwrap();
        let budget = cert.budget(atoms.len() as f64);
        let (w1, _) = w1_distance(&uniform(atoms.clone()), &cert.worst_case).unwrap();
        prop_assert!(budget <= eps + 1e-9);
        prop_assert!(w1 <= eps + 1e-9);
        prop_assert!((budget - w1).abs() <= 1e-9, "budget {budget} vs W1 {w1}");
    }

    #[test]
    fn worst_case_dominates_the_sample_average((q, x, atoms, eps) in instance(5)) {
        let model = model(&q);
        let support = Support::from_points(&atoms).unwrap();
        let problem = CertProblem { model: &model, x: &x, support: &support, radius: eps, policy: ExecPolicy::Sequential };
        let cert = generate_blocking(&problem, &CertConfig::new(EPS1), None).unwrap();
        let average = atoms.iter().map(|a| q.eval(&x, a)).sum::<f64>() / atoms.len() as f64;
        prop_assert!(cert.j_eps1 >= average - 1e-9);
        prop_assert!((problem.sample_average().unwrap() - average).abs() <= 1e-9 * average.abs().max(1.0));
    }

    #[test]
    fn unit_weights_reduce_to_the_empirical_problem((q, x, atoms, eps) in instance(4)) {
        let model = model(&q);
        let plain = Support::from_points(&atoms).unwrap();
        let weighted = Support::weighted(&atoms, &vec![1.0; atoms.len()], atoms.len()).unwrap();
        let cfg = CertConfig::new(EPS1);
        let a = generate_blocking(
            &CertProblem { model: &model, x: &x, support: &plain, radius: eps, policy: ExecPolicy::Sequential },
            &cfg,
            None,
        ).unwrap();
        let b = generate_blocking(
            &CertProblem { model: &model, x: &x, support: &weighted, radius: eps, policy: ExecPolicy::Sequential },
            &cfg,
            None,
        ).unwrap();
        prop_assert_eq!(a.j_eps1.to_bits(), b.j_eps1.to_bits());
    }
}

#[test]
fn duplicated_atoms_match_a_doubled_weight() {
    let q = DiagQuadratic { d: 1, m: 2, a: vec![1.0], b: vec![0.5, -1.0], c: vec![-1.0, -0.5] };
    let model = model(&q);
    let x = [0.7];
    let atoms = vec![vec![1.0, -2.0], vec![1.0, -2.0], vec![-0.5, 0.3]];
    let plain = Support::from_points(&atoms).unwrap();
    let weighted = Support::weighted(&[atoms[0].clone(), atoms[2].clone()], &[2.0, 1.0], 3).unwrap();
    let cfg = CertConfig::new(1e-8);
    let j = |s: &Support| {
        generate_blocking(&CertProblem { model: &model, x: &x, support: s, radius: 0.8, policy: ExecPolicy::Sequential }, &cfg, None)
            .unwrap()
            .j_eps1
    };
    let (oracle, _) = q.worst_case(&x, &atoms, 0.8);
    assert!((j(&plain) - oracle).abs() <= 1e-8);
    assert!((j(&weighted) - oracle).abs() <= 1e-8);
}
