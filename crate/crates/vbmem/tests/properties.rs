//! Cross-module property tests: distribution identities under random
//! inputs, engine invariants (determinism, simplex responsibilities,
//! positive-definite posteriors), and serialization round trips.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use vbmem::dist::{
    expect_quadratic_form, kl_categorical, kl_full_gaussian, kl_matrix_normal, FullGaussian,
    MatrixNormal, OneHotCategorical,
};
use vbmem::elbo::elbo_closed_form;
use vbmem::engine::{write_episode, InferenceConfig, InitMode};
use vbmem::episode::{episode_from_json, episode_to_json, CodePosterior, Episode};
use vbmem::model::{AddressPosterior, ModelSpec, Variant};

fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() * b.nrows(), a.ncols() * b.ncols());
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            out.view_mut((i * b.nrows(), j * b.ncols()), (b.nrows(), b.ncols()))
                .copy_from(&(b * a[(i, j)]));
        }
    }
    out
}

fn spd_from(entries: &[f64], n: usize, boost: f64) -> DMatrix<f64> {
    let a = DMatrix::from_row_slice(n, n, entries);
    &a * a.transpose() + DMatrix::identity(n, n) * (0.5 + boost)
}

prop_compose! {
    fn matrix_normal_pair()(k in 1usize..=4, c in 1usize..=4)(
        k in Just(k),
        c in Just(c),
        mean_q in prop::collection::vec(-3.0f64..3.0, k * c),
        mean_p in prop::collection::vec(-3.0f64..3.0, k * c),
        cov_q in prop::collection::vec(-1.0f64..1.0, k * k),
        cov_p in prop::collection::vec(-1.0f64..1.0, k * k),
        boost in 0.0f64..1.0,
    ) -> (MatrixNormal, MatrixNormal) {
        let q = MatrixNormal::new(
            DMatrix::from_row_slice(k, c, &mean_q),
            spd_from(&cov_q, k, boost),
        ).unwrap();
        let p = MatrixNormal::new(
            DMatrix::from_row_slice(k, c, &mean_p),
            spd_from(&cov_p, k, 1.0 - boost),
        ).unwrap();
        (q, p)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matrix_normal_kl_equals_vectorized_gaussian_kl((q, p) in matrix_normal_pair()) {
        let direct = kl_matrix_normal(&q, &p).unwrap();
        let c = q.cols();
        let qv = FullGaussian::new(
            DVector::from_column_slice(q.mean().as_slice()),
            kron(&DMatrix::identity(c, c), q.row_cov()),
        ).unwrap();
        let pv = FullGaussian::new(
            DVector::from_column_slice(p.mean().as_slice()),
            kron(&DMatrix::identity(c, c), p.row_cov()),
        ).unwrap();
        let vectorized = kl_full_gaussian(&qv, &pv).unwrap();
        prop_assert!((direct - vectorized).abs() <= 1e-10,
            "direct {direct} vs vectorized {vectorized}");
        prop_assert!(direct >= -1e-10);
    }

    #[test]
    fn categorical_kl_is_nonnegative_and_zero_at_equality(
        raw in prop::collection::vec(0.05f64..1.0, 2..6),
        raw_p in prop::collection::vec(0.05f64..1.0, 2..6),
    ) {
        let n = raw.len().min(raw_p.len());
        let norm = |v: &[f64]| {
            let s: f64 = v[..n].iter().sum();
            OneHotCategorical::new(DVector::from_iterator(n, v[..n].iter().map(|x| x / s))).unwrap()
        };
        let q = norm(&raw);
        let p = norm(&raw_p);
        prop_assert!(kl_categorical(&q, &p).unwrap() >= -1e-10);
        prop_assert!(kl_categorical(&q, &q).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn quadratic_form_linearity(
        mean in prop::collection::vec(-2.0f64..2.0, 3),
        cov in prop::collection::vec(-1.0f64..1.0, 9),
        a_raw in prop::collection::vec(-2.0f64..2.0, 9),
        b_raw in prop::collection::vec(-2.0f64..2.0, 9),
        alpha in -2.0f64..2.0,
    ) {
        let g = FullGaussian::new(DVector::from_vec(mean), spd_from(&cov, 3, 0.2)).unwrap();
        let a = DMatrix::from_row_slice(3, 3, &a_raw);
        let b = DMatrix::from_row_slice(3, 3, &b_raw);
        let va = expect_quadratic_form(&g, &a).unwrap();
        let vb = expect_quadratic_form(&g, &b).unwrap();
        let combined = expect_quadratic_form(&g, &(&a * alpha + &b)).unwrap();
        prop_assert!((combined - (alpha * va + vb)).abs() <= 1e-9 * (1.0 + combined.abs()));
        let sym = expect_quadratic_form(&g, &(0.5 * (&a + a.transpose()))).unwrap();
        prop_assert!((sym - va).abs() <= 1e-9 * (1.0 + va.abs()));
    }

    #[test]
    fn episode_json_round_trip(
        t in 1usize..5,
        c in 1usize..4,
        observed in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let codes: Vec<CodePosterior> = (0..t).map(|_| {
            let mean = DVector::from_fn(c, |_, _| rng.random_range(-5.0..5.0));
            if observed {
                CodePosterior::observed(mean).unwrap()
            } else {
                let var = DVector::from_fn(c, |_, _| rng.random_range(0.01..2.0));
                CodePosterior::new(mean, var).unwrap()
            }
        }).collect();
        let episode = Episode::new(codes, "prop").unwrap();
        let back = episode_from_json(&episode_to_json(&episode).unwrap()).unwrap();
        prop_assert_eq!(episode, back);
    }
}

fn random_observed_codes(rng: &mut ChaCha12Rng, t: usize, c: usize) -> Vec<CodePosterior> {
    (0..t)
        .map(|_| {
            CodePosterior::observed(DVector::from_fn(c, |_, _| rng.random_range(-2.0..2.0)))
                .unwrap()
        })
        .collect()
}

#[test]
fn write_episode_is_deterministic_under_seed() {
    let mut rng = ChaCha12Rng::seed_from_u64(12);
    let spec = ModelSpec::with_defaults(Variant::Tree, 2, 4, 2, 2, 0.8).unwrap();
    let codes = random_observed_codes(&mut rng, 6, 4);
    let cfg = InferenceConfig {
        sweeps: 3,
        init_mode: InitMode::DataDependent,
        rng_seed: 99,
        elbo_trace: true,
        early_stop_rel_tol: None,
    };
    let a = write_episode(&spec, &codes, &cfg).unwrap();
    let b = write_episode(&spec, &codes, &cfg).unwrap();
    assert_eq!(a, b);

    let other = write_episode(
        &spec,
        &codes,
        &InferenceConfig {
            rng_seed: 100,
            ..cfg
        },
    )
    .unwrap();
    assert_ne!(a, other, "different seeds should change the random init");
}

#[test]
fn responsibilities_stay_on_the_simplex_and_posteriors_stay_valid() {
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let spec = ModelSpec::with_defaults(Variant::Mixture, 3, 4, 3, 1, 0.7).unwrap();
    let codes = random_observed_codes(&mut rng, 10, 4);
    for sweeps in 1..=4 {
        let result = write_episode(
            &spec,
            &codes,
            &InferenceConfig {
                sweeps,
                init_mode: InitMode::DataDependent,
                rng_seed: 3,
                elbo_trace: false,
                early_stop_rel_tol: None,
            },
        )
        .unwrap();
        for address in &result.addresses {
            let AddressPosterior::Mixture(block) = address else {
                panic!("mixture episode yields mixture addresses");
            };
            let total: f64 = block.assignment.probs().iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(block.assignment.probs().iter().all(|p| (0.0..=1.0).contains(p)));
        }
        for h in 0..3 {
            // Construction succeeds only with a positive-definite row
            // covariance, so rebuilding is the Cholesky check.
            let mem = &result.memory.cluster(0, h).memory;
            MatrixNormal::new(mem.mean().clone(), mem.row_cov().clone()).unwrap();
        }
    }
}

#[test]
fn updates_consume_only_code_means_and_variances() {
    // Observed codes and latent codes with identical means produce the
    // same posteriors: the engine reads nothing else from an episode.
    let mut rng = ChaCha12Rng::seed_from_u64(8);
    let spec = ModelSpec::with_defaults(Variant::Mixture, 2, 3, 2, 1, 1.0).unwrap();
    let observed = random_observed_codes(&mut rng, 5, 3);
    let latent: Vec<CodePosterior> = observed
        .iter()
        .map(|c| {
            CodePosterior::new(c.mean().clone(), DVector::from_element(3, 0.3)).unwrap()
        })
        .collect();
    let cfg = InferenceConfig {
        sweeps: 3,
        init_mode: InitMode::Prior,
        rng_seed: 0,
        elbo_trace: false,
        early_stop_rel_tol: None,
    };
    let a = write_episode(&spec, &observed, &cfg).unwrap();
    let b = write_episode(&spec, &latent, &cfg).unwrap();
    assert_eq!(a.memory, b.memory);
    assert_eq!(a.addresses, b.addresses);
}

#[test]
fn reconstruction_terms_shift_the_bound_without_touching_posteriors() {
    let mut rng = ChaCha12Rng::seed_from_u64(9);
    let spec = ModelSpec::with_defaults(Variant::CategoricalAddress, 3, 4, 1, 1, 1.0).unwrap();
    let codes = random_observed_codes(&mut rng, 5, 4);
    let cfg = InferenceConfig {
        sweeps: 2,
        init_mode: InitMode::Prior,
        rng_seed: 0,
        elbo_trace: false,
        early_stop_rel_tol: None,
    };
    let result = write_episode(&spec, &codes, &cfg).unwrap();
    let offsets: Vec<f64> = (0..5).map(|i| 0.7 * i as f64 - 1.0).collect();
    let base = elbo_closed_form(&spec, &codes, &result, None).unwrap();
    let shifted = elbo_closed_form(&spec, &codes, &result, Some(&offsets)).unwrap();
    let sum: f64 = offsets.iter().sum();
    assert!((shifted.total - base.total - sum).abs() < 1e-10);
}

#[test]
fn early_stop_trims_the_trace() {
    let mut rng = ChaCha12Rng::seed_from_u64(10);
    let spec = ModelSpec::with_defaults(Variant::GaussianAddress, 2, 3, 1, 1, 1.0).unwrap();
    let codes = random_observed_codes(&mut rng, 4, 3);
    let result = write_episode(
        &spec,
        &codes,
        &InferenceConfig {
            sweeps: 500,
            init_mode: InitMode::Prior,
            rng_seed: 0,
            elbo_trace: true,
            early_stop_rel_tol: Some(1e-9),
        },
    )
    .unwrap();
    assert!(result.elbo_trace.len() < 501, "stopped after {} entries", result.elbo_trace.len());
    assert!(result.elbo_trace.len() >= 2);
}

#[test]
fn elbo_breakdown_serializes_with_named_fields() {
    let spec = ModelSpec::with_defaults(Variant::GaussianAddress, 1, 1, 1, 1, 1.0).unwrap();
    let codes = vec![CodePosterior::observed(DVector::from_vec(vec![0.5])).unwrap()];
    let result = write_episode(
        &spec,
        &codes,
        &InferenceConfig {
            sweeps: 1,
            init_mode: InitMode::Prior,
            rng_seed: 0,
            elbo_trace: false,
            early_stop_rel_tol: None,
        },
    )
    .unwrap();
    let breakdown = elbo_closed_form(&spec, &codes, &result, None).unwrap();
    let json: serde_json::Value = serde_json::to_value(breakdown).unwrap();
    let object = json.as_object().unwrap();
    for field in ["recon", "code_kl", "address_kl", "memory_kl", "total"] {
        assert!(object.contains_key(field), "missing field {field}");
    }
    assert_eq!(object.len(), 5);
}

#[test]
fn bound_is_invariant_under_cluster_relabeling() {
    use vbmem::model::{ClusterPosterior, MemoryState, MixtureAddress};

    let mut rng = ChaCha12Rng::seed_from_u64(77);
    let spec = ModelSpec::with_defaults(Variant::Mixture, 2, 3, 3, 1, 0.8).unwrap();
    let codes = random_observed_codes(&mut rng, 6, 3);
    let result = write_episode(
        &spec,
        &codes,
        &InferenceConfig {
            sweeps: 3,
            init_mode: InitMode::DataDependent,
            rng_seed: 4,
            elbo_trace: false,
            early_stop_rel_tol: None,
        },
    )
    .unwrap();

    // Relabel clusters with a fixed permutation, consistently across the
    // memory state, assignment probabilities, and weight conditionals.
    let perm = [2usize, 0, 1];
    let clusters: Vec<ClusterPosterior> = perm
        .iter()
        .map(|h| result.memory.cluster(0, *h).clone())
        .collect();
    let relabeled_memory = MemoryState::new(Variant::Mixture, vec![clusters], None).unwrap();
    let relabeled_addresses: Vec<AddressPosterior> = result
        .addresses
        .iter()
        .map(|address| {
            let AddressPosterior::Mixture(block) = address else {
                panic!("mixture addresses expected");
            };
            let probs = DVector::from_iterator(
                3,
                perm.iter().map(|h| block.assignment.probs()[*h]),
            );
            AddressPosterior::Mixture(
                MixtureAddress::new(
                    vbmem::dist::OneHotCategorical::new(probs).unwrap(),
                    perm.iter().map(|h| block.conditionals[*h].clone()).collect(),
                )
                .unwrap(),
            )
        })
        .collect();
    let relabeled = vbmem::engine::InferenceResult {
        memory: relabeled_memory,
        addresses: relabeled_addresses,
        elbo_trace: Vec::new(),
    };

    let original = elbo_closed_form(&spec, &codes, &result, None).unwrap().total;
    let permuted = elbo_closed_form(&spec, &codes, &relabeled, None).unwrap().total;
    assert!(
        (original - permuted).abs() <= 1e-10 * (1.0 + original.abs()),
        "original {original} vs relabeled {permuted}"
    );
}

#[test]
fn writing_under_a_resized_spec_keeps_the_bound_monotone() {
    use vbmem::readout::{resize_memory, ResizeStrategy};

    let small = ModelSpec::with_defaults(Variant::Mixture, 6, 10, 10, 1, 1.0).unwrap();
    let large = ModelSpec::with_defaults(Variant::Mixture, 6, 10, 100, 1, 1.0).unwrap();
    let resized = resize_memory(&small, &large, ResizeStrategy::Rewrite).unwrap();

    let mut rng = ChaCha12Rng::seed_from_u64(42);
    let codes = random_observed_codes(&mut rng, 12, 10);
    let result = write_episode(
        &resized,
        &codes,
        &InferenceConfig {
            sweeps: 3,
            init_mode: InitMode::Random,
            rng_seed: 1,
            elbo_trace: true,
            early_stop_rel_tol: None,
        },
    )
    .unwrap();
    assert_eq!(result.memory.clusters(), 100);
    for pair in result.elbo_trace.windows(2) {
        assert!(pair[1] >= pair[0] - (1e-8 * pair[0].abs()).max(1e-12));
    }
}
