use std::collections::BTreeSet;

use melodapt::adaptation::{episode_class_weights, meta_weights, random_support, select_support};
use melodapt::metrics::{evaluate, rca, rpa, PitchTrack};
use melodapt::model::Posteriors;
use melodapt::nn::{ParameterSet, Tensor};
use melodapt::signal::{class_to_hz, decode_wav, encode_wav, hz_to_class, quantize_labels, AudioClip, FrameLabels, MAX_CLASS};
use melodapt::training::{mcp, tcp_n, ClassWeights};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn posterior_columns() -> impl Strategy<Value = (Vec<Vec<f32>>, Vec<u16>)> {
    (2usize..30, 1usize..20).prop_flat_map(|(c, m)| {
        (
            prop::collection::vec(prop::collection::vec(-8.0f32..8.0, c), m),
            prop::collection::vec(0..c as u16, m),
        )
            .prop_map(|(logits, labels)| {
                let cols = logits
                    .into_iter()
                    .map(|l| {
                        let z: f32 = l.iter().map(|v| v.exp()).sum();
                        l.iter().map(|v| v.exp() / z).collect()
                    })
                    .collect();
                (cols, labels)
            })
    })
}

fn label_pair() -> impl Strategy<Value = (Vec<u16>, Vec<u16>)> {
    (1usize..200, prop::collection::vec(0u16..506, 1..8)).prop_flat_map(|(m, palette)| {
        let p = palette.clone();
        (
            prop::collection::vec(prop::sample::select(palette), m),
            prop::collection::vec(prop::sample::select(p), m),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn class_mapping_round_trips_within_half_a_class(f in 55.0f64..1700.0) {
        let c = hz_to_class(f).unwrap();
        prop_assert!(c >= 1 && c <= MAX_CLASS);
        if c < MAX_CLASS {
            let back = class_to_hz(c).unwrap();
            let cents = 1200.0 * (f / back).log2();
            prop_assert!(cents.abs() <= 12.5 / 2.0 + 1e-9, "{f} -> {c} -> {back}");
        }
    }

    #[test]
    fn quantized_labels_have_the_requested_length(track in prop::collection::vec(prop_oneof![Just(0.0), 60.0f64..1500.0], 0..700), n in 1usize..600) {
        let l = quantize_labels(&track, n).unwrap();
        prop_assert_eq!(l.len(), n);
        for (m, &c) in l.classes.iter().enumerate() {
            let voiced = track.get(m).is_some_and(|&f| f > 0.0);
            prop_assert_eq!(c > 0, voiced);
        }
    }

    #[test]
    fn tcp_n_is_a_bounded_confidence((cols, labels) in posterior_columns()) {
        let post = Posteriors::from_columns(&cols);
        let labels = FrameLabels::new(labels).unwrap();
        let c = tcp_n(&post, &labels);
        let top = mcp(&post);
        for m in 0..cols.len() {
            prop_assert!(c[m] > 0.0 && c[m] <= 1.0);
            prop_assert!(top[m] >= post.prob(labels.classes[m] as usize, m));
            if post.argmax(m) == labels.classes[m] as usize {
                prop_assert_eq!(c[m], 1.0);
            }
        }
    }

    #[test]
    fn episode_weights_balance_every_present_class((truth, _) in label_pair()) {
        let w = episode_class_weights(&truth, 506);
        let present: BTreeSet<u16> = truth.iter().copied().collect();
        for c in 0..506u16 {
            let n = truth.iter().filter(|&&t| t == c).count() as f64;
            if present.contains(&c) {
                prop_assert!((n * w.0[c as usize] - truth.len() as f64).abs() < 1e-9);
            } else {
                prop_assert_eq!(w.0[c as usize], 0.0);
            }
        }
    }

    #[test]
    fn meta_weights_only_amplify((truth, predicted) in label_pair(), lambda in 0.0f64..1.0, cap in 0.1f64..10.0) {
        let g = episode_class_weights(&truth, 506);
        let w = meta_weights(&g, &predicted, lambda, cap);
        for c in 0..506 {
            if g.0[c] == 0.0 {
                prop_assert_eq!(w.0[c], 0.0);
            } else {
                prop_assert!(w.0[c] >= g.0[c]);
                prop_assert!(w.0[c] <= g.0[c] * (lambda * cap).exp() * (1.0 + 1e-12));
            }
        }
        prop_assert_eq!(meta_weights(&g, &truth, lambda, cap), g);
    }

    #[test]
    fn active_support_takes_the_least_confident_frames(
        conf in prop::collection::vec(0u8..10, 1..300),
        excl in prop::collection::btree_set(0usize..300, 0..20),
        k in 1usize..20,
    ) {
        let conf: Vec<f32> = conf.into_iter().map(|v| v as f32 / 10.0).collect();
        let excluded: BTreeSet<usize> = excl.into_iter().filter(|&i| i < conf.len()).collect();
        let available = conf.len() - excluded.len();
        match select_support(&conf, k, &excluded) {
            Err(_) => prop_assert!(k > available),
            Ok(p) => {
                prop_assert_eq!(p.support.len(), k);
                prop_assert_eq!(p.support.len() + p.query.len() + excluded.len(), conf.len());
                prop_assert!(p.support.iter().all(|s| !excluded.contains(s) && !p.query.contains(s)));
                let worst_support = p.support.iter().map(|&s| conf[s]).fold(f32::MIN, f32::max);
                prop_assert!(p.query.iter().all(|&q| conf[q] >= worst_support));
            }
        }
    }

    #[test]
    fn random_support_is_a_seeded_partition(n in 1usize..300, k in 1usize..20, seed in any::<u64>()) {
        let excluded: BTreeSet<usize> = (0..n).step_by(7).collect();
        let draw = || random_support(&mut ChaCha8Rng::seed_from_u64(seed), n, k, &excluded);
        match (draw(), draw()) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(&a, &b);
                prop_assert_eq!(a.support.len() + a.query.len() + excluded.len(), n);
                prop_assert!(a.support.windows(2).all(|w| w[0] < w[1]));
            }
            (Err(_), Err(_)) => prop_assert!(k > n - excluded.len()),
            _ => prop_assert!(false, "non-deterministic"),
        }
    }

    #[test]
    fn chroma_accuracy_bounds_raw_accuracy(
        pairs in prop::collection::vec((prop_oneof![Just(0.0), 55.0f64..1500.0], prop_oneof![Just(0.0), 55.0f64..1500.0], -2i32..3), 1..80)
    ) {
        let r: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let e: Vec<f64> = pairs.iter().map(|p| if p.2 == 0 { p.1 } else { p.0 * 2f64.powi(p.2) }).collect();
        let (r, e) = (PitchTrack::new(r).unwrap(), PitchTrack::new(e).unwrap());
        let s = evaluate(&e, &r, 50.0).unwrap();
        prop_assert!(s.rca >= s.rpa);
        prop_assert!((0.0..=1.0).contains(&s.oa));
        prop_assert_eq!(rpa(&r, &r, 50.0).unwrap().value, if s.empty_reference { 0.0 } else { 1.0 });
        prop_assert_eq!(rca(&r, &r, 50.0).unwrap().value, if s.empty_reference { 0.0 } else { 1.0 });
    }

    #[test]
    fn wav_round_trip_is_exact(samples in prop::collection::vec(-1.0f32..1.0, 1..4000)) {
        let clip = AudioClip::new(samples, 8000);
        let back = decode_wav(&encode_wav(&clip), "clip").unwrap();
        prop_assert_eq!(back, clip);
    }

    #[test]
    fn checksum_sees_every_bit(values in prop::collection::vec(-10.0f32..10.0, 1..50), idx in any::<prop::sample::Index>()) {
        let mut a = ParameterSet::new();
        a.insert("w", Tensor::new(vec![values.len()], values.clone()), true).unwrap();
        let mut b = a.clone();
        prop_assert_eq!(a.checksum(), b.checksum());
        let i = idx.index(values.len());
        let t = &mut b.get_mut("w").unwrap().tensor.data[i];
        *t = f32::from_bits(t.to_bits() ^ 1);
        prop_assert_ne!(a.checksum(), b.checksum());
    }
}

#[test]
fn uniform_weights_are_ones() {
    assert!(ClassWeights::uniform(7).as_slice().iter().all(|&w| w == 1.0));
}
