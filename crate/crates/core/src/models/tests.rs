use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::*;
use crate::rng::{stream, Domain};
use crate::tensor::gradcheck::grad_check_params;

fn random_tensor<S: Scalar>(shape: &[usize], seed: u64) -> Tensor<S> {
    let mut rng = stream(seed, Domain::Bench, 1, 0);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| S::from_f64(rng.random_range(-1.0..1.0))).collect()).unwrap()
}

fn set<S: Scalar>(reg: &mut ParameterRegistry<S>, id: ParamId, value: Tensor<S>) {
    assert_eq!(reg.get(id).value.shape(), value.shape());
    reg.get_mut(id).value = value;
}

fn zero_prefix<S: Scalar>(reg: &mut ParameterRegistry<S>, prefix: &str) {
    let ids: Vec<_> = reg.iter().filter(|(_, p)| p.name.starts_with(prefix)).map(|(id, _)| id).collect();
    for id in ids {
        let shape = reg.get(id).value.shape().to_vec();
        set(reg, id, Tensor::zeros(&shape));
    }
}

/// Re-draws every parameter from U(-scale, scale) so gradients are generic.
fn randomize<S: Scalar>(reg: &mut ParameterRegistry<S>, scale: f64, seed: u64) {
    let mut rng = stream(seed, Domain::Bench, 2, 0);
    for (_, p) in reg.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = S::from_f64(rng.random_range(-scale..scale)));
    }
}

/// Like [`randomize`], but matrices are scaled by `1/sqrt(fan_in)` so
/// activations stay O(1) and no gradient sits at the finite-difference
/// noise floor.
fn randomize_fan_in<S: Scalar>(reg: &mut ParameterRegistry<S>, seed: u64) {
    let mut rng = stream(seed, Domain::Bench, 3, 0);
    for (_, p) in reg.iter_mut() {
        let scale = match p.value.shape() {
            [fan_in, _] if p.name.ends_with(".w") => 1.7 / (*fan_in as f64).sqrt(),
            _ => 0.5,
        };
        p.value.data_mut().iter_mut().for_each(|v| *v = S::from_f64(rng.random_range(-scale..scale)));
    }
}

fn tiny_vit_cfg() -> ViTConfig {
    ViTConfig {
        image_size: 32,
        patch_size: 16,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        ..ViTConfig::default()
    }
}

fn build_vit<S: Scalar>(cfg: &ViTConfig) -> (ViT, ParameterRegistry<S>) {
    let mut reg = ParameterRegistry::new();
    let vit = ViT::new(&mut reg, "vit0", cfg, &mut stream(1, Domain::Init, 0, 0)).unwrap();
    (vit, reg)
}

/// Plain-loop `x W + b` in f64.
fn affine(x: &[f64], rows: usize, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        for j in 0..n {
            let mut acc = b.data()[j];
            for i in 0..k {
                acc += x[r * k + i] * w.data()[i * n + j];
            }
            out[r * n + j] = acc;
        }
    }
    out
}

#[test]
fn sequence_lengths() {
    assert_eq!(ViTConfig::default().seq_len(), 197);
    let cfg = ViTConfig { image_size: 64, ..ViTConfig::default() };
    assert_eq!(cfg.num_patches(), 16);
    let (vit, reg) = build_vit::<f32>(&cfg);
    let mut tape = Tape::new();
    let x = tape.constant(random_tensor(&[2, 3, 64, 64], 1));
    let seq = vit.patch_embed(&mut tape, &reg, x).unwrap();
    assert_eq!(tape.shape(seq), &[2, 17, 64]);
    let f = vit.forward(&mut tape, &reg, x).unwrap();
    assert_eq!(tape.shape(f), &[2, 64]);
}

#[test]
fn config_validation() {
    assert!(ViTConfig { image_size: 60, ..ViTConfig::default() }.validate().is_err());
    assert!(ViTConfig { heads: 3, ..ViTConfig::default() }.validate().is_err());
    assert!(ConvConfig::default().validate(64).is_ok());
    assert!(ConvConfig::default().validate(36).is_err());
    assert!(ConvConfig { widths: vec![], ..ConvConfig::default() }.validate(64).is_err());
}

#[test]
fn zero_image_embeds_to_class_token_plus_positions() {
    let cfg = tiny_vit_cfg();
    let (vit, mut reg) = build_vit::<f64>(&cfg);
    zero_prefix(&mut reg, "vit0.patch.");
    set(&mut reg, vit.cls, random_tensor(&[1, 8], 3));
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 32, 32]));
    let seq = vit.patch_embed(&mut tape, &reg, x).unwrap();
    let (cls, pos) = (&reg.get(vit.cls).value, &reg.get(vit.pos).value);
    let got = tape.value(seq).data();
    for r in 0..5 {
        for d in 0..8 {
            let expect = pos.data()[r * 8 + d] + if r == 0 { cls.data()[d] } else { 0.0 };
            assert_eq!(got[r * 8 + d], expect);
        }
    }
}

#[test]
fn patch_embedding_matches_loop_oracle() {
    let cfg = tiny_vit_cfg();
    let (vit, mut reg) = build_vit::<f64>(&cfg);
    randomize(&mut reg, 0.5, 4);
    let img = random_tensor::<f64>(&[1, 3, 32, 32], 5);
    let mut tape = Tape::new();
    let x = tape.constant(img.clone());
    let seq = vit.patch_embed(&mut tape, &reg, x).unwrap();
    let (w, b) = (&reg.get(vit.patch.w).value, &reg.get(vit.patch.b.unwrap()).value);
    let pos = &reg.get(vit.pos).value;
    for (pi, (gy, gx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
        let mut flat = Vec::new();
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    flat.push(img.data()[(c * 32 + gy * 16 + y) * 32 + gx * 16 + x]);
                }
            }
        }
        let emb = affine(&flat, 1, w, b);
        for d in 0..8 {
            let expect = emb[d] + pos.data()[(pi + 1) * 8 + d];
            assert!((tape.value(seq).data()[(pi + 1) * 8 + d] - expect).abs() < 1e-12);
        }
    }
}

fn attention_fixture() -> (Attention, ParameterRegistry<f64>) {
    let mut reg = ParameterRegistry::new();
    let attn = Attention::new(&mut reg, "attn", 8, 2, &mut stream(2, Domain::Init, 0, 0)).unwrap();
    randomize(&mut reg, 0.7, 6);
    (attn, reg)
}

#[test]
fn single_token_attention_is_projected_value() {
    let (attn, reg) = attention_fixture();
    let x = random_tensor::<f64>(&[1, 1, 8], 7);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (out, weights) = attn.forward_with_weights(&mut tape, &reg, xv).unwrap();
    assert!(tape.value(weights).data().iter().all(|&w| w == 1.0));
    let v = affine(x.data(), 1, &reg.get(attn.v.w).value, &reg.get(attn.v.b.unwrap()).value);
    let expect = affine(&v, 1, &reg.get(attn.o.w).value, &reg.get(attn.o.b.unwrap()).value);
    for (g, e) in tape.value(out).data().iter().zip(&expect) {
        assert!((g - e).abs() < 1e-12);
    }
}

#[test]
fn zero_query_gives_uniform_attention() {
    let (attn, mut reg) = attention_fixture();
    zero_prefix(&mut reg, "attn.q.");
    let x = random_tensor::<f64>(&[1, 5, 8], 8);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (out, weights) = attn.forward_with_weights(&mut tape, &reg, xv).unwrap();
    assert!(tape.value(weights).data().iter().all(|&w| (w - 0.2).abs() < 1e-15));
    let v = affine(x.data(), 5, &reg.get(attn.v.w).value, &reg.get(attn.v.b.unwrap()).value);
    let mean: Vec<f64> = (0..8).map(|d| (0..5).map(|r| v[r * 8 + d]).sum::<f64>() / 5.0).collect();
    let expect = affine(&mean, 1, &reg.get(attn.o.w).value, &reg.get(attn.o.b.unwrap()).value);
    for r in 0..5 {
        for d in 0..8 {
            assert!((tape.value(out).data()[r * 8 + d] - expect[d]).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rows_are_distributions() {
    let (attn, reg) = attention_fixture();
    for seed in 0..20 {
        let mut tape = Tape::new();
        let xv = tape.constant(random_tensor::<f64>(&[2, 7, 8], 100 + seed).map(|v| v * 5.0));
        let (_, weights) = attn.forward_with_weights(&mut tape, &reg, xv).unwrap();
        for row in tape.value(weights).data().chunks(7) {
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }
    let mut tape = Tape::new();
    let bad = tape.constant(Tensor::<f64>::zeros(&[1, 3, 6]));
    assert!(attn.forward(&mut tape, &reg, bad).is_err());
}

#[test]
fn zero_block_is_identity() {
    let cfg = tiny_vit_cfg();
    let (vit, mut reg) = build_vit::<f32>(&cfg);
    zero_prefix(&mut reg, "vit0.blocks.0.");
    let x = random_tensor::<f32>(&[2, 5, 8], 9);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = vit.blocks[0].forward(&mut tape, &reg, xv).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn block_gradient_check() {
    let cfg = tiny_vit_cfg();
    let (vit, mut reg) = build_vit::<f64>(&cfg);
    randomize(&mut reg, 0.5, 10);
    let x = random_tensor::<f64>(&[2, 5, 8], 11);
    let weights = random_tensor::<f64>(&[2, 5, 8], 12);
    let block = vit.blocks[0].clone();
    let err = grad_check_params(
        |tape, reg| {
            let xv = tape.constant(x.clone());
            let y = block.forward(tape, reg, xv)?;
            let w = tape.constant(weights.clone());
            let p = tape.mul(y, w)?;
            Ok(tape.sum(p))
        },
        &reg,
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn depth_zero_feature_is_normed_class_row() {
    let cfg = ViTConfig { depth: 0, ..tiny_vit_cfg() };
    let (vit, mut reg) = build_vit::<f64>(&cfg);
    randomize(&mut reg, 0.5, 13);
    let mut tape = Tape::new();
    let x = tape.constant(random_tensor(&[1, 3, 32, 32], 14));
    let f = vit.forward(&mut tape, &reg, x).unwrap();
    let seq = vit.patch_embed(&mut tape, &reg, x).unwrap();
    let row = &tape.value(seq).data()[..8];
    let mean = row.iter().sum::<f64>() / 8.0;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
    let (g, b) = (&reg.get(vit.norm.gamma).value, &reg.get(vit.norm.beta).value);
    for d in 0..8 {
        let expect = (row[d] - mean) / (var + LN_EPS).sqrt() * g.data()[d] + b.data()[d];
        assert!((tape.value(f).data()[d] - expect).abs() < 1e-12);
    }
}

/// Swaps the top-left and bottom-right 16×16 patches of every image.
fn swap_patches(img: &Tensor<f64>) -> Tensor<f64> {
    let mut out = img.clone();
    let s = img.shape().to_vec();
    for b in 0..s[0] {
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    let a = ((b * 3 + c) * 32 + y) * 32 + x;
                    let z = ((b * 3 + c) * 32 + y + 16) * 32 + x + 16;
                    out.data_mut().swap(a, z);
                }
            }
        }
    }
    out
}

#[test]
fn position_embeddings_break_patch_permutation_symmetry() {
    let cfg = ViTConfig { depth: 2, ..tiny_vit_cfg() };
    let (vit, mut reg) = build_vit::<f64>(&cfg);
    randomize(&mut reg, 0.5, 15);
    let img = random_tensor::<f64>(&[1, 3, 32, 32], 16);
    let swapped = swap_patches(&img);
    let feature = |reg: &ParameterRegistry<f64>, img: &Tensor<f64>| {
        let mut tape = Tape::new();
        let x = tape.constant(img.clone());
        let f = vit.forward(&mut tape, reg, x).unwrap();
        tape.value(f).clone()
    };
    let (a, b) = (feature(&reg, &img), feature(&reg, &swapped));
    let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff > 1e-3, "{diff}");

    zero_prefix(&mut reg, "vit0.pos");
    let (a, b) = (feature(&reg, &img), feature(&reg, &swapped));
    let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn conv_constant_input_identity_kernels() {
    let cfg = ConvConfig { widths: vec![3], kernel: 1, ..ConvConfig::default() };
    let mut reg = ParameterRegistry::<f32>::new();
    let net = ConvNet::new(&mut reg, "conv0", &cfg, &mut stream(3, Domain::Init, 0, 0)).unwrap();
    let mut eye = Tensor::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        eye.data_mut()[c * 3 + c] = 1.0;
    }
    set(&mut reg, net.stages[0].w, eye);
    let mut img = Tensor::zeros(&[1, 3, 8, 8]);
    for (i, v) in img.data_mut().iter_mut().enumerate() {
        *v = [0.25, 0.5, 2.0][i / 64];
    }
    let mut tape = Tape::new();
    let x = tape.constant(img);
    let f = net.forward(&mut tape, &reg, x).unwrap();
    assert_eq!(tape.value(f).data(), &[0.25, 0.5, 2.0]);
}

#[test]
fn conv_matches_naive_loop_oracle() {
    let cfg = ConvConfig { widths: vec![4], ..ConvConfig::default() };
    let mut reg = ParameterRegistry::<f64>::new();
    let net = ConvNet::new(&mut reg, "conv0", &cfg, &mut stream(4, Domain::Init, 0, 0)).unwrap();
    randomize(&mut reg, 0.5, 17);
    let img = random_tensor::<f64>(&[2, 3, 8, 8], 18);
    let mut tape = Tape::new();
    let x = tape.constant(img.clone());
    let f = net.forward(&mut tape, &reg, x).unwrap();
    assert_eq!(tape.shape(f), &[2, 4]);
    let (w, bias) = (&reg.get(net.stages[0].w).value, &reg.get(net.stages[0].b).value);
    let px = |b: usize, c: usize, y: i64, x: i64| {
        if (0..8).contains(&y) && (0..8).contains(&x) {
            img.data()[((b * 3 + c) * 8 + y as usize) * 8 + x as usize]
        } else {
            0.0
        }
    };
    for b in 0..2 {
        for o in 0..4 {
            let mut act = [[0.0f64; 8]; 8];
            for (y, row) in act.iter_mut().enumerate() {
                for (x, cell) in row.iter_mut().enumerate() {
                    let mut acc = bias.data()[o];
                    for c in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                acc += w.data()[((o * 3 + c) * 3 + ky) * 3 + kx] * px(b, c, y as i64 + ky as i64 - 1, x as i64 + kx as i64 - 1);
                            }
                        }
                    }
                    *cell = acc.max(0.0);
                }
            }
            // average pooling then a global mean equals the plain mean
            let expect = act.iter().flatten().sum::<f64>() / 64.0;
            assert!((tape.value(f).data()[b * 4 + o] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn linear_head_examples() {
    let mut reg = ParameterRegistry::<f64>::new();
    let head = Linear::new(&mut reg, "head", 6, 2, Init::Zeros, &mut stream(5, Domain::Init, 0, 0)).unwrap();
    set(&mut reg, head.b.unwrap(), Tensor::from_vec(&[2], vec![0.3, -0.3]).unwrap());
    let mut tape = Tape::new();
    let f = tape.constant(random_tensor(&[3, 6], 19));
    let z = linear_head(&mut tape, &reg, &head, f).unwrap();
    assert_eq!(tape.value(z).data(), &[0.3, -0.3, 0.3, -0.3, 0.3, -0.3]);

    randomize(&mut reg, 1.0, 20);
    let feats = random_tensor::<f64>(&[3, 6], 21);
    let mut tape = Tape::new();
    let f = tape.constant(feats.clone());
    let z = linear_head(&mut tape, &reg, &head, f).unwrap();
    let expect = affine(feats.data(), 3, &reg.get(head.w).value, &reg.get(head.b.unwrap()).value);
    for (g, e) in tape.value(z).data().iter().zip(&expect) {
        assert!((g - e).abs() < 1e-12);
    }
}

#[test]
fn hybrid_head_examples() {
    let spec = ModelSpec::new(ModelKind::Hybrid2, 32);
    let mut reg = ParameterRegistry::<f32>::new();
    let model = Classifier::build(&spec, &mut reg, 7).unwrap();
    let Head::Hybrid(head) = &model.head else { panic!("expected hybrid head") };
    assert_eq!(reg.get(head.fc1.w).value.shape(), &[128, 512]);
    assert_eq!(reg.get(head.fc2.w).value.shape(), &[512, 2]);

    let img = random_tensor::<f32>(&[2, 3, 32, 32], 22);
    let logits = |reg: &ParameterRegistry<f32>, mode: Mode, seed: u64| {
        let mut tape = Tape::new();
        let x = tape.constant(img.clone());
        let z = model.forward(&mut tape, reg, x, mode, &mut stream(seed, Domain::Dropout, 0, 0)).unwrap();
        tape.value(z).clone()
    };
    assert_eq!(logits(&reg, Mode::Eval, 1), logits(&reg, Mode::Eval, 2));
    assert_ne!(logits(&reg, Mode::Train, 1), logits(&reg, Mode::Train, 2));

    zero_prefix(&mut reg, "head.fc2.w");
    set(&mut reg, head.fc2.b.unwrap(), Tensor::from_vec(&[2], vec![0.7, -0.2]).unwrap());
    assert_eq!(logits(&reg, Mode::Train, 3).data(), &[0.7, -0.2, 0.7, -0.2]);

    let mut tape = Tape::new();
    let wrong = tape.constant(Tensor::<f32>::zeros(&[2, 100]));
    assert!(hybrid_head(&mut tape, &reg, head, &[wrong], Mode::Eval, &mut stream(0, Domain::Dropout, 0, 0)).is_err());
}

#[test]
fn classifiers_build_and_name_their_blocks() {
    for kind in [ModelKind::Vit, ModelKind::Conv, ModelKind::Hybrid2, ModelKind::Hybrid3] {
        let spec = ModelSpec::new(kind, 32);
        let mut reg = ParameterRegistry::<f32>::new();
        let model = Classifier::build(&spec, &mut reg, 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(random_tensor(&[3, 3, 32, 32], 23));
        let z = model.forward(&mut tape, &reg, x, Mode::Eval, &mut stream(0, Domain::Dropout, 0, 0)).unwrap();
        assert_eq!(tape.shape(z), &[3, 2]);
        assert_eq!(ModelKind::parse(kind.name()), Some(kind));

        let head_count = reg.count_with_prefix(HEAD_PREFIX);
        model.freeze_backbones(&mut reg);
        assert_eq!(reg.trainable_count(), head_count);
    }
    let spec = ModelSpec::new(ModelKind::Hybrid3, 32);
    let model = Classifier::build(&spec, &mut ParameterRegistry::<f32>::new(), 1).unwrap();
    assert_eq!(
        model.unfreeze_targets(2),
        vec!["vit0.blocks.2.", "vit0.blocks.3.", "conv0.stages.1.", "conv0.stages.2.", "vit1.blocks.2.", "vit1.blocks.3."]
    );
    assert_eq!(model.unfreeze_targets(1)[0], "vit0.blocks.3.");
}

#[test]
fn build_is_seed_deterministic() {
    let spec = ModelSpec::new(ModelKind::Hybrid2, 32);
    let (mut a, mut b, mut c) = (ParameterRegistry::<f32>::new(), ParameterRegistry::new(), ParameterRegistry::new());
    Classifier::build(&spec, &mut a, 5).unwrap();
    Classifier::build(&spec, &mut b, 5).unwrap();
    Classifier::build(&spec, &mut c, 6).unwrap();
    let values = |r: &ParameterRegistry<f32>| r.iter().flat_map(|(_, p)| p.value.data().to_vec()).collect::<Vec<_>>();
    assert_eq!(values(&a), values(&b));
    assert_ne!(values(&a), values(&c));
    // truncated normal init never exceeds two standard deviations
    let pos = a.get(a.id("vit0.pos").unwrap());
    assert!(pos.value.data().iter().all(|v| v.abs() <= 0.04));
}

/// Full tiny-ViT classifier: loss gradient for every trainable parameter.
///
/// The step is 1e-5 rather than 1e-6: through a full model the round-off of
/// each loss evaluation divided by a 1e-6 step already reaches 1e-10, which is
/// comparable to the smallest patch-weight gradients.
pub(crate) fn tiny_vit_grad_error() -> f64 {
    tiny_vit_grad_error_at(24, 1e-5)
}

pub(crate) fn tiny_vit_grad_error_at(seed: u64, eps: f64) -> f64 {
    let spec = ModelSpec {
        vit: tiny_vit_cfg(),
        ..ModelSpec::new(ModelKind::Vit, 32)
    };
    let mut reg = ParameterRegistry::<f64>::new();
    let model = Classifier::build(&spec, &mut reg, 3).unwrap();
    randomize_fan_in(&mut reg, seed);
    let img = random_tensor::<f64>(&[2, 3, 32, 32], 25);
    let targets = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.3, 0.7]).unwrap();
    grad_check_params(
        |tape, reg| {
            let x = tape.constant(img.clone());
            let z = model.forward(tape, reg, x, Mode::Eval, &mut stream(0, Domain::Dropout, 0, 0))?;
            tape.soft_cross_entropy(z, &targets)
        },
        &reg,
        eps,
    )
    .unwrap()
}

#[test]
fn tiny_vit_end_to_end_gradient_check() {
    let err = tiny_vit_grad_error();
    assert!(err <= 1e-4, "{err}");
}


