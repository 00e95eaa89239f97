//! Property tests for the invariants every stage relies on.

use advfuse::classifier::{CnnArch, CnnSpec, Preprocessing, SmallCnn};
use advfuse::defense::{bit_squeeze, DefenseConfig};
use advfuse::eval::attack_success_rate;
use advfuse::generator::{Generator, GeneratorConfig, DEFAULT_EPSILON};
use advfuse::image::ImageTensor;
use advfuse::latent::{encode_latent, export_latent, import_latent, make_pseudo_latent, Provenance, TargetClass, TargetLatent};
use advfuse::mask::sample_partition;
use advfuse::metrics::{attention_area_ratio, ActivationMap};
use candle_core::DType;
use proptest::prelude::*;

fn image(c: usize, h: usize, w: usize) -> impl Strategy<Value = ImageTensor> {
    prop::collection::vec(0.0f32..=1.0, c * h * w).prop_map(move |d| ImageTensor::new(c, h, w, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn perturbation_never_exceeds_budget(seed in 0u64..1_000, log_scale in -1.0f64..2.0, class in 0u32..8) {
        let cfg = GeneratorConfig { height: 16, width: 16, base_channels: 8, key_dim: 8, ..GeneratorConfig::toy() };
        let g = Generator::new(cfg, DType::F32, seed).unwrap();
        let scale = 10f64.powf(log_scale);
        for (_, var) in g.params().iter() {
            var.set(&(var.as_tensor() * scale).unwrap()).unwrap();
        }
        let x = ImageTensor::filled(3, 16, 16, 0.5).unwrap();
        let target = TargetClass::new(class, "t");
        let delta = g.forward(&x, &target, &make_pseudo_latent(&target, seed)).unwrap();
        prop_assert!(delta.linf() <= DEFAULT_EPSILON as f32);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn latent_export_import_is_identity(class in 0u32..1000, data in prop::collection::vec(-8.0f32..8.0, 4 * 64 * 64)) {
        let z = TargetLatent::new(class, data, Provenance::Imported).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.lat");
        export_latent(&z, &path).unwrap();
        let back = import_latent(&path, class).unwrap();
        prop_assert!(back.bits_eq(&z));
        prop_assert_eq!(encode_latent(&back), encode_latent(&z));
    }

    #[test]
    fn asr_ignores_image_order(imgs in prop::collection::vec(image(3, 16, 16), 2..8), target in 0u32..4, rot in 0usize..8) {
        let spec = CnnSpec {
            arch: CnnArch::CnnA,
            in_channels: 3,
            num_classes: 4,
            preprocessing: Preprocessing::identity(3, 16, 16),
        };
        let victim = SmallCnn::new("v", spec, 7).unwrap();
        let t = TargetClass::new(target, "t");
        let mut shuffled = imgs.clone();
        shuffled.reverse();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        let none = DefenseConfig::None;
        let a = attack_success_rate(&imgs, &victim, &t, &none).unwrap();
        let b = attack_success_rate(&shuffled, &victim, &t, &none).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn bit_squeeze_is_idempotent(x in image(3, 6, 5), bits in 1u32..=8) {
        let once = bit_squeeze(&x, bits).unwrap();
        let twice = bit_squeeze(&once, bits).unwrap();
        prop_assert_eq!(once.data(), twice.data());
        let levels = ((1u32 << bits) - 1) as f32;
        for v in once.data() {
            prop_assert!((0.0..=1.0).contains(v));
            prop_assert!(((v * levels).round() - v * levels).abs() < 1e-3);
        }
    }

    #[test]
    fn area_ratio_is_monotone_in_tau(raw in prop::collection::vec(-5.0f64..5.0, 64), mut taus in prop::collection::vec(0.0f64..=1.0, 2..10)) {
        let map = ActivationMap::normalized(8, 8, &raw).unwrap();
        taus.sort_by(f64::total_cmp);
        let ratios: Vec<f64> = taus.iter().map(|t| attention_area_ratio(&map, *t)).collect();
        for w in ratios.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        prop_assert!(ratios.iter().all(|r| (0.0..=1.0).contains(r)));
    }

    #[test]
    fn mask_blocks_tile_the_plane(n in 2usize..5, h in 4usize..40, w in 4usize..40, seed in any::<u64>()) {
        prop_assume!(h >= n && w >= n);
        let spec = sample_partition(n, h, w, seed).unwrap();
        let mut cover = vec![0u8; h * w];
        for i in 0..n {
            for j in 0..n {
                let (rows, cols) = spec.block(i, j);
                prop_assert!(!rows.is_empty() && !cols.is_empty());
                for y in rows {
                    for x in cols.clone() {
                        cover[y * w + x] += 1;
                    }
                }
            }
        }
        prop_assert!(cover.iter().all(|c| *c == 1));
        prop_assert_ne!(spec.masked_blocks[0], spec.masked_blocks[1]);
        let keep = spec.keep_plane();
        let masked = keep.iter().filter(|k| !**k).count();
        prop_assert_eq!(masked, spec.masked_area());
    }
}
