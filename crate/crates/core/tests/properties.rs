mod support;

use botkit::attention::{mhsa2d, MhsaConfig, MhsaParams, PosMode, PosParams, RelPosTables};
use botkit::backbone::{build_backbone, stage_shapes, BuildOptions, Family};
use botkit::cost::{count_madds, stage_breakdown};
use botkit::ops;
use botkit::rng::ParamRng;
use botkit::Tensor;
use proptest::prelude::*;
use support::oracle;

fn family() -> impl Strategy<Value = Family> {
    prop_oneof![
        Just(Family::Resnet),
        Just(Family::Botnet),
        Just(Family::BotnetS1),
        Just(Family::Senet)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-300.0f64..300.0, 1..40), k in 1usize..8) {
        let rows = vals.len() / k;
        prop_assume!(rows > 0);
        let x = Tensor::new(&[rows, k], vals[..rows * k].to_vec()).unwrap();
        for row in ops::softmax_lastdim(&x).data().chunks(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rel_logits_match_oracle(h in 1usize..7, w in 1usize..7, d in 1usize..5, seed in 0u64..1000) {
        let mut rng = ParamRng::new(seed);
        let q: Tensor<f64> = rng.normal(&[2, h * w, d], 1.0);
        let r_h: Tensor<f64> = rng.normal(&[2 * h - 1, d], 1.0);
        let r_w: Tensor<f64> = rng.normal(&[2 * w - 1, d], 1.0);
        let got = ops::rel_logits_2d(&q, &r_h, &r_w, h, w).unwrap();
        prop_assert!(oracle::max_abs(got.data(), &oracle::rel_logits(&q, &r_h, &r_w, h, w)) <= 1e-12);
    }

    #[test]
    fn zero_tables_equal_content_only(h in 1usize..5, w in 1usize..5, heads in 1usize..4, seed in 0u64..1000) {
        let d = heads * 2;
        let mut rng = ParamRng::new(seed);
        let cfg = MhsaConfig::new(d, heads, h, w, PosMode::Relative).unwrap();
        let none = MhsaConfig { pos_mode: PosMode::None, ..cfg.clone() };
        let p = MhsaParams::<Tensor<f64>>::init(&none, &mut rng);
        let (sh, sw) = cfg.rel_table_shapes();
        let zeroed = MhsaParams {
            pos: PosParams::Relative(RelPosTables { r_h: Tensor::zeros(&sh), r_w: Tensor::zeros(&sw) }),
            ..p.clone()
        };
        let x: Tensor<f64> = rng.normal(&[1, d, h, w], 1.0);
        prop_assert_eq!(mhsa2d(&x, &zeroed, &cfg).unwrap(), mhsa2d(&x, &p, &none).unwrap());
    }

    #[test]
    fn doubling_resolution_scales_conv_by_4_and_logits_by_16(
        f in family(),
        depth in prop::sample::select(vec!["50", "101"]),
        k in 1usize..12,
    ) {
        let res = 32 * k;
        let arch = build_backbone(f, depth, &BuildOptions::at(res)).unwrap();
        let a = stage_breakdown(&arch, (res, res)).unwrap();
        let b = stage_breakdown(&arch, (2 * res, 2 * res)).unwrap();
        for ((stage, x), (_, y)) in a.iter().zip(&b) {
            prop_assert_eq!(y.conv, 4 * x.conv, "{}", stage);
            prop_assert_eq!(y.attn_logits(), 16 * x.attn_logits(), "{}", stage);
        }
        let lo = count_madds(&arch, (res, res)).unwrap();
        let hi = count_madds(&arch, (2 * res, 2 * res)).unwrap();
        prop_assert_eq!(lo.totals.params, hi.totals.params);
        prop_assert!(hi.totals.madds > lo.totals.madds);
    }

    #[test]
    fn stage_extents_follow_strides(f in family(), k in 1usize..40) {
        let res = 32 * k;
        let arch = build_backbone(f, "50", &BuildOptions::at(res)).unwrap();
        let s = stage_shapes(&arch, (res, res)).unwrap();
        let c5 = if f == Family::BotnetS1 { res / 16 } else { res / 32 };
        let want = [res / 2, res / 4, res / 8, res / 16, c5];
        let got: Vec<usize> = s.iter().map(|x| x.h).collect();
        prop_assert_eq!(got, want.to_vec());
    }

    #[test]
    fn non_multiple_of_32_is_rejected(f in family(), res in 1usize..2048) {
        prop_assume!(res % 32 != 0);
        prop_assert!(build_backbone(f, "50", &BuildOptions::at(res)).is_err());
    }
}
