use std::collections::BTreeSet;

use super::*;
use crate::clip::{calibration_texts, tokenize_all, LayerKind, ModelConfig, Variant};
use crate::quant::fake_quant_tensor;
use crate::rng::Prng;

fn rng(seed: u64) -> Prng {
    SeedStream::new(seed).rng()
}

fn linear_info(o: usize, i: usize, ln: bool) -> LayerInfo {
    LayerInfo {
        name: "toy.fc".into(),
        encoder: Encoder::Text,
        kind: LayerKind::Linear,
        weight_shape: vec![o, i],
        has_bias: true,
        macs: (o * i) as u64,
        first_layer: false,
        text_mlp: false,
        follows_layernorm: ln,
    }
}

struct Toy {
    info: LayerInfo,
    w: Tensor,
    b: Tensor,
    x: Tensor,
    y: Tensor,
}

fn toy(seed: u64, ln: bool) -> Toy {
    let mut r = rng(seed);
    let info = linear_info(24, 32, ln);
    let w = Tensor::randn([24, 32], &mut r).map(|v| v * 0.2);
    let b = Tensor::randn([24], &mut r).map(|v| v * 0.1);
    let x = Tensor::randn([64, 8, 32], &mut r);
    let y = recon::unit_output_fp(&info, &w, Some(&b), &x).unwrap();
    Toy { info, w, b, x, y }
}

fn cfg(iterations: usize) -> CalibConfig {
    CalibConfig {
        iterations,
        lr_image: 1e-3,
        lr_text: 1e-3,
        ..CalibConfig::default()
    }
}

fn run(t: &Toy, wb: u8, ab: u8, c: &CalibConfig) -> (recon::UnitResult, UnitReport) {
    let d = UnitData {
        info: &t.info,
        weight: &t.w,
        bias: Some(&t.b),
        inputs: &t.x,
        target: &t.y,
    };
    reconstruct("toy", &d, wb, ab, c, c.lr_image, SeedStream::new(3)).unwrap()
}

#[test]
fn bit_config_parses_both_spellings() {
    assert_eq!("4,8".parse::<BitConfig>().unwrap(), BitConfig::W4A8);
    assert_eq!("w6a6".parse::<BitConfig>().unwrap(), BitConfig::W6A6);
    assert_eq!("32,32".parse::<BitConfig>().unwrap(), BitConfig::FP);
    assert!("1,8".parse::<BitConfig>().is_err());
    assert!("9,8".parse::<BitConfig>().is_err());
    assert!("48".parse::<BitConfig>().is_err());
    assert_eq!(BitConfig::W4A8.label(), "W4A8");
}

#[test]
fn config_rejects_unknown_keys() {
    assert!(serde_json::from_str::<CalibConfig>(r#"{"iterations": 3, "bogus": 1}"#).is_err());
    let c: CalibConfig = serde_json::from_str(r#"{"iterations": 3}"#).unwrap();
    assert_eq!(c.n_images, 128);
    assert_eq!(c.iterations, 3);
}

#[test]
fn partition_covers_every_layer_once() {
    for (variant, expect) in [(Variant::Cnn, 5 + 9), (Variant::Vit, 18 + 9)] {
        let m = ClipModel::new(ModelConfig::new(variant), 0);
        let units = partition(&m).unwrap();
        assert_eq!(units.len(), expect, "{variant:?}");
        let mut seen = BTreeSet::new();
        for u in &units {
            for l in &u.layers {
                assert!(seen.insert(l.clone()), "{l} in two units");
            }
        }
        let all: BTreeSet<String> = m.layers().into_iter().map(|l| l.name).collect();
        assert_eq!(seen, all);
        let excluded: Vec<&str> = units.iter().filter(|u| u.excluded).map(|u| u.id.as_str()).collect();
        match variant {
            Variant::Cnn => {
                assert_eq!(excluded, ["image.stage1"]);
                assert!(units.iter().filter(|u| u.kind == UnitKind::Block).count() == 4);
            }
            Variant::Vit => assert_eq!(excluded, ["image.embed"]),
        }
    }
}

#[test]
fn floating_point_bits_give_zero_loss() {
    let t = toy(1, false);
    let (res, rep) = run(&t, 32, 32, &cfg(10));
    assert!(res.weight.is_none() && res.act.is_none());
    assert!(rep.trace.iter().all(|&v| v == 0.0));
    assert_eq!(rep.final_mse, 0.0);
    assert!(!rep.stalled);
}

#[test]
fn tuned_params_never_worse_than_init_on_holdout() {
    for seed in 0..4 {
        let t = toy(seed, seed % 2 == 0);
        let (_, rep) = run(&t, 4, 4, &cfg(60));
        assert!(rep.final_mse <= rep.init_mse, "seed {seed}: {rep:?}");
        assert_eq!(rep.trace.len(), 60);
    }
}

#[test]
fn learned_scales_reduce_low_bit_error() {
    // uneven input feature scales: matching weight values is no longer
    // the same as matching the layer output
    let mut t = toy(7, false);
    let mut r = rng(70);
    let col: Vec<f32> = (0..32).map(|_| (r.uniform_range(-2.5, 1.0)).exp()).collect();
    for (i, v) in t.x.data_mut().iter_mut().enumerate() {
        *v *= col[i % 32];
    }
    t.y = recon::unit_output_fp(&t.info, &t.w, Some(&t.b), &t.x).unwrap();
    let (res, rep) = run(&t, 3, 8, &cfg(300));
    assert!(!rep.reverted);
    assert!(rep.final_mse < rep.init_mse, "{} vs {}", rep.final_mse, rep.init_mse);
    assert!(res.weight.is_some() && res.act.is_some());
}

#[test]
fn eight_bit_unit_error_is_small() {
    let t = toy(2, true);
    let (res, rep) = run(&t, 8, 8, &cfg(20));
    assert!(rep.rel_error_isolated < 0.01, "{}", rep.rel_error_isolated);
    assert_eq!(res.act.unwrap().granularity(), crate::quant::Granularity::PerChannel { axis: 2 });
}

#[test]
fn adaround_weights_land_on_grid() {
    let t = toy(4, false);
    let c = CalibConfig {
        adaround: true,
        ..cfg(40)
    };
    let (res, _) = run(&t, 4, 8, &c);
    if let Some(w) = res.rounded_weight {
        let p = res.weight.unwrap();
        let again = fake_quant_tensor(&w, &p).unwrap();
        assert!(again.max_abs_diff(&w) < 1e-6);
        // learned rounding moves each weight by less than one step from nearest
        let nearest = fake_quant_tensor(&t.w, &p).unwrap();
        let step = p.scale().iter().cloned().fold(0.0f32, f32::max);
        assert!(w.max_abs_diff(&nearest) <= step * 1.001);
    }
}

#[test]
fn too_few_samples_is_an_error() {
    let t = toy(5, false);
    let small = t.x.slice_rows(0, 8).unwrap();
    let ys = t.y.slice_rows(0, 8).unwrap();
    let d = UnitData {
        info: &t.info,
        weight: &t.w,
        bias: Some(&t.b),
        inputs: &small,
        target: &ys,
    };
    assert!(reconstruct("toy", &d, 4, 8, &cfg(5), 1e-3, SeedStream::new(0)).is_err());
}

#[test]
fn stall_detection() {
    let falling: Vec<f32> = (0..40).map(|i| 1.0 / (1.0 + i as f32)).collect();
    assert!(!recon::is_stalled(&falling));
    let flat = vec![0.5f32; 40];
    assert!(recon::is_stalled(&flat));
    let rising: Vec<f32> = (0..40).map(|i| i as f32).collect();
    assert!(recon::is_stalled(&rising));
}

#[test]
fn quantize_clip_end_to_end_small() {
    let m = ClipModel::new(ModelConfig::new(Variant::Cnn), 0);
    let images = Tensor::randn([16, 3, 64, 64], &mut rng(9));
    let texts = tokenize_all(&calibration_texts(16, &mut rng(10)));
    let c = CalibConfig {
        iterations: 2,
        holdout_frac: 0.0,
        ..CalibConfig::default()
    };
    let (q, report) = quantize_clip(&m, &images, &texts, &c).unwrap();
    assert_eq!(q.excluded_layers(), ["image.stage1.conv"]);
    assert_eq!(report.units.len(), 13);
    for l in q.model.layers() {
        if let Some(p) = q.weights.get(&l.name) {
            let expect = if l.text_mlp { 8 } else { 4 };
            assert_eq!(p.bits(), expect, "{}", l.name);
        }
    }
    // stage 1 weights stay bit-exact
    assert_eq!(
        q.model.param("image.stage1.conv.weight").unwrap(),
        m.param("image.stage1.conv.weight").unwrap()
    );
    let csv = report.traces_csv();
    assert_eq!(csv.lines().count(), 1 + 13 * 2);

    let ck = q.to_checkpoint().unwrap();
    let back = QuantizedClip::from_checkpoint(&crate::checkpoint::Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
    assert_eq!(back, q);
    assert!(QuantizedClip::from_checkpoint(&m.to_checkpoint().unwrap()).is_err());

    let short = tokenize_all(&calibration_texts(4, &mut rng(1)));
    assert!(quantize_clip(&m, &images, &short, &c).is_err());
}
