//! Property tests over the documented invariants.

use std::collections::HashSet;
use std::sync::OnceLock;

use chimera_core::config::RunConfig;
use chimera_core::eval::{fid, gaussian_stats, GaussianStats, GradeRecord};
use chimera_core::nn::{adam_step, AdamState, DenseNet, Gradients};
use chimera_core::prior::{time_features, NoiseSchedule};
use chimera_core::seed::{gaussian_vec, rng_from};
use chimera_core::taxonomy::{
    derive_seed, generate_corpus, generate_record, render_prompt, sample_atoms, Taxonomy, TaxonomyError,
};
use chimera_core::world::{Embedding, WorldSpec};
use chimera_core::Exec;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn shipped() -> &'static Taxonomy {
    static T: OnceLock<Taxonomy> = OnceLock::new();
    T.get_or_init(Taxonomy::default_shipped)
}

fn world() -> &'static WorldSpec {
    static W: OnceLock<WorldSpec> = OnceLock::new();
    W.get_or_init(|| WorldSpec::new(0, 64, shipped()).unwrap())
}

/// Reference FNV-1a 64 written out from the published constants.
fn fnv_reference(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[test]
fn fnv_reference_value() {
    assert_eq!(fnv_reference(b"a"), 0xAF63_DC4C_8601_EC8C);
    assert_eq!(derive_seed("a"), 0xAF63_DC4C_8601_EC8C);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn seed_matches_reference_hash(s in "\\PC{1,80}") {
        prop_assert_eq!(derive_seed(&s), fnv_reference(s.as_bytes()));
    }

    #[test]
    fn records_are_self_consistent(master in any::<u64>(), id in 0u64..1_000_000, mix in 0.0f64..=1.0) {
        let r = generate_record(shipped(), id, master, mix).unwrap();
        prop_assert!((2..=4).contains(&r.atoms.len()));
        let parts: HashSet<&str> = r.atoms.iter().map(|a| a.part.as_str()).collect();
        prop_assert_eq!(parts.len(), r.atoms.len());
        prop_assert_eq!(&r.text, &render_prompt(&r.prefix, &r.atoms));
        prop_assert_eq!(r.seed, derive_seed(&r.text));
        if !r.domain_mix {
            prop_assert!(r.atoms.iter().all(|a| a.domain == r.atoms[0].domain));
        }
        prop_assert!(r.atoms.iter().all(|a| shipped().contains(a)));
    }

    #[test]
    fn sampled_atoms_have_distinct_parts(seed in any::<u64>(), k in 2usize..=4, mix in any::<bool>()) {
        let atoms = sample_atoms(shipped(), &mut rng_from(seed), k, mix).unwrap();
        prop_assert_eq!(atoms.len(), k);
        let parts: HashSet<&str> = atoms.iter().map(|a| a.part.as_str()).collect();
        prop_assert_eq!(parts.len(), k);
    }

    #[test]
    fn validate_rejects_cardinality_mutations(d in 0usize..6, p in 0usize..8, kind in 0usize..4) {
        let mut domains = shipped().domains().to_vec();
        match kind {
            0 => domains[d].parts[p].subjects.truncate(5),
            1 => {
                let extra: Vec<String> = (0..20).map(|i| format!("extra{i}")).collect();
                domains[d].parts[p].subjects = extra;
            }
            2 => { domains[d].parts.remove(p); }
            _ => { domains.remove(d); }
        }
        let mutated = Taxonomy::from_domains(domains);
        prop_assert!(matches!(mutated.validate(), Err(TaxonomyError::Validation(_))));
    }

    #[test]
    fn compose_then_decode_is_identity(seed in any::<u64>(), k in 2usize..=4, mix in any::<bool>()) {
        let atoms = sample_atoms(shipped(), &mut rng_from(seed), k, mix).unwrap();
        let cond = world().condition_set(&atoms).unwrap();
        let target = world().compose_target(&cond);
        prop_assert!((target.norm() - 1.0).abs() < 1e-9);
        prop_assert_eq!(world().decode_parts(&target, k), atoms);
    }

    #[test]
    fn fid_symmetric_and_closed_form(seed in any::<u64>(), d in 2usize..10, shift in -3.0f64..3.0) {
        let mut rng = rng_from(seed);
        let xs: Vec<Embedding> = (0..3 * d).map(|_| Embedding(gaussian_vec(&mut rng, d))).collect();
        let a = gaussian_stats(&xs).unwrap();
        let ys: Vec<Embedding> = (0..3 * d).map(|_| Embedding(gaussian_vec(&mut rng, d))).collect();
        let b = gaussian_stats(&ys).unwrap();
        let ab = fid(&a, &b).unwrap();
        prop_assert!((ab - fid(&b, &a).unwrap()).abs() < 1e-8);
        prop_assert!(fid(&a, &a).unwrap().abs() < 1e-8);
        prop_assert!(ab > -1e-8);
        let moved = GaussianStats { mean: &a.mean + DVector::from_element(d, shift), cov: a.cov.clone(), n: a.n };
        prop_assert!((fid(&a, &moved).unwrap() - shift * shift * d as f64).abs() < 1e-8);
    }

    #[test]
    fn grade_records_are_normalized(v in prop::collection::vec(0u8..=1, 1..30)) {
        let r = GradeRecord::from_verdicts(v.clone()).unwrap();
        prop_assert!(r.partial_score <= r.max_score);
        prop_assert!((0.0..=1.0).contains(&r.normalized));
        prop_assert_eq!(r.partial_score, v.iter().filter(|&&x| x == 1).count());
    }

    #[test]
    fn batch_forward_matches_rows(seed in any::<u64>(), batch in 1usize..6) {
        let net = DenseNet::new(&[5, 7, 3], seed).unwrap();
        let x = gaussian_vec(&mut rng_from(seed ^ 1), 5 * batch);
        let y = net.predict_batch(&x, batch).unwrap();
        for (i, row) in x.chunks(5).enumerate() {
            let (yi, _) = net.forward(row).unwrap();
            prop_assert_eq!(&y[i * 3..(i + 1) * 3], &yi[..]);
        }
    }

    #[test]
    fn zero_gradient_adam_step_keeps_parameters(seed in any::<u64>(), lr in 1e-5f64..1e-1) {
        let mut net = DenseNet::new(&[4, 6, 2], seed).unwrap();
        let before = net.clone();
        let mut state = AdamState::new(&net, lr);
        let zero = Gradients::zeros_like(&net);
        adam_step(&mut net, &zero, &mut state).unwrap();
        prop_assert_eq!(net, before);
        prop_assert_eq!(state.step, 1);
    }

    #[test]
    fn q_sample_matches_formula(seed in any::<u64>(), t in 1usize..=1000) {
        let s = NoiseSchedule::default();
        let mut rng = rng_from(seed);
        let e = gaussian_vec(&mut rng, 8);
        let eps = gaussian_vec(&mut rng, 8);
        let ab: f64 = (1..=t).map(|i| 1.0 - s.beta(i)).product();
        let got = s.q_sample(&e, t, &eps);
        for i in 0..8 {
            prop_assert!((got[i] - (ab.sqrt() * e[i] + (1.0 - ab).sqrt() * eps[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn time_features_bounded(t in 0.0f64..=1.0) {
        let f = time_features(t);
        for j in 0..8 {
            prop_assert!((f[j] * f[j] + f[j + 8] * f[j + 8] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn config_text_round_trips(steps in 1usize..100_000, lr in 1e-6f64..1.0, seed in any::<u64>(), w in 1usize..512) {
        let c = RunConfig { steps, lr, train_seed: seed, hidden: vec![w, w + 1], ..RunConfig::default() };
        let mut back = RunConfig::default();
        back.apply_str(&c.to_config_string(), "prop").unwrap();
        prop_assert_eq!(back, c);
    }
}

#[test]
fn per_item_seeding_is_order_independent() {
    let c = generate_corpus(shipped(), 400, 77, 0.5, Exec::Parallel).unwrap();
    for i in [0usize, 1, 199, 399] {
        assert_eq!(c.records[i], generate_record(shipped(), i as u64, 77, 0.5).unwrap());
    }
    assert_eq!(c, generate_corpus(shipped(), 400, 77, 0.5, Exec::Sequential).unwrap());
}

#[test]
fn rotations_are_orthogonal() {
    for i in 0..4 {
        let r = world().rotation(i);
        let err = (r.transpose() * r - DMatrix::identity(64, 64)).abs().max();
        assert!(err < 1e-9, "slot {i}: {err}");
    }
}
