//! The candle image encoder against the host-side reference transformer,
//! loaded from identical weights.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarBuilder;
use hiseg_core::backend::ImageEncoder;
use hiseg_core::fusion::{HeadPolicy, LayerAttention, LayerNormParams, Linear};
use hiseg_core::preprocess::PreparedImage;
use hiseg_core::toy::{ToyConfig, ToyVit};
use hiseg_models::{ClipVision, VisionConfig};
use ndarray::{Array, Array3, Dimension};

fn toy_config() -> ToyConfig {
    ToyConfig {
        patch: 4,
        width: 16,
        heads: 4,
        depth: 3,
        joint_width: 8,
        mlp_width: 32,
        grid: (2, 2),
    }
}

fn vision_config(c: &ToyConfig) -> VisionConfig {
    VisionConfig {
        patch: c.patch,
        width: c.width,
        heads: c.heads,
        depth: c.depth,
        mlp_width: c.mlp_width,
        joint_width: c.joint_width,
        grid: c.grid,
        eps: 1e-5,
    }
}

fn tensor<D: Dimension>(a: &Array<f32, D>) -> Tensor {
    let data: Vec<f32> = a.as_standard_layout().iter().copied().collect();
    Tensor::from_vec(data, a.shape(), &Device::Cpu).unwrap()
}

fn put_norm(m: &mut HashMap<String, Tensor>, prefix: &str, n: &LayerNormParams) {
    m.insert(format!("{prefix}.weight"), tensor(&n.weight));
    m.insert(format!("{prefix}.bias"), tensor(&n.bias));
}

fn put_linear(m: &mut HashMap<String, Tensor>, prefix: &str, l: &Linear) {
    m.insert(format!("{prefix}.weight"), tensor(&l.weight));
    if let Some(b) = &l.bias {
        m.insert(format!("{prefix}.bias"), tensor(b));
    }
}

/// The reference weights under Hugging Face CLIP names.
fn hf_tensors(toy: &ToyVit) -> HashMap<String, Tensor> {
    let c = toy.config;
    let mut m = HashMap::new();
    let e = "vision_model.embeddings";
    let conv = toy.patch_embed.clone().into_shape_with_order((c.width, 3, c.patch, c.patch)).unwrap();
    m.insert(format!("{e}.patch_embedding.weight"), tensor(&conv));
    m.insert(format!("{e}.class_embedding"), tensor(&toy.class_embedding));
    m.insert(format!("{e}.position_embedding.weight"), tensor(&toy.position_embedding));
    put_norm(&mut m, "vision_model.pre_layrnorm", &toy.pre_norm);
    put_norm(&mut m, "vision_model.post_layernorm", &toy.post_norm);
    for (i, b) in toy.blocks.iter().enumerate() {
        let p = format!("vision_model.encoder.layers.{i}");
        put_norm(&mut m, &format!("{p}.layer_norm1"), &b.ln1);
        put_norm(&mut m, &format!("{p}.layer_norm2"), &b.ln2);
        put_linear(&mut m, &format!("{p}.self_attn.q_proj"), &b.query);
        put_linear(&mut m, &format!("{p}.self_attn.k_proj"), &b.key);
        put_linear(&mut m, &format!("{p}.self_attn.v_proj"), &b.value);
        put_linear(&mut m, &format!("{p}.self_attn.out_proj"), &b.out);
        put_linear(&mut m, &format!("{p}.mlp.fc1"), &b.fc1);
        put_linear(&mut m, &format!("{p}.mlp.fc2"), &b.fc2);
    }
    put_linear(&mut m, "visual_projection", &toy.projection);
    m
}

fn pair(seed: u64) -> (ToyVit, ClipVision) {
    let toy = ToyVit::random(toy_config(), seed).unwrap();
    let vb = VarBuilder::from_tensors(hf_tensors(&toy), DType::F32, &Device::Cpu);
    let clip = ClipVision::load(vb, vision_config(&toy.config), "toy").unwrap();
    (toy, clip)
}

/// A 3x2 patch grid, so positions are resampled from the 2x2 table.
fn input() -> PreparedImage {
    let pixels = Array3::from_shape_fn((3, 8, 12), |(c, y, x)| ((c * 31 + y * 7 + x * 3) % 17) as f32 / 8.0 - 1.0);
    PreparedImage { pixels, patch: 4 }
}

fn max_diff<D: Dimension>(a: &Array<f32, D>, b: &Array<f32, D>) -> f32 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn trace_matches_reference_encoder() {
    let (toy, clip) = pair(3);
    let x = input();
    let want = toy.trace(&x, HeadPolicy::PerHeadPassthrough).unwrap();
    let got = clip.trace(&x, HeadPolicy::PerHeadPassthrough).unwrap();
    assert_eq!(got.grid, (2, 3));
    assert_eq!(got.layers.len(), want.layers.len());
    for (g, w) in got.layers.iter().zip(&want.layers) {
        assert_eq!(g.layer_index, w.layer_index);
        assert!(max_diff(g.embeddings.data(), w.embeddings.data()) < 1e-5);
        let (LayerAttention::PerHead(gs), LayerAttention::PerHead(ws)) = (&g.attention, &w.attention) else {
            panic!("per-head attention expected");
        };
        for (a, b) in gs.maps().iter().zip(ws.maps()) {
            assert!(max_diff(a.data(), b.data()) < 1e-5);
        }
    }
}

#[test]
fn class_embedding_matches_reference_encoder() {
    let (toy, clip) = pair(5);
    let x = input();
    let want = toy.forward_class_embedding(&x).unwrap();
    let got = clip.forward_class_embedding(&x, false).unwrap();
    assert!(max_diff(&got, &want) < 1e-5, "{got} vs {want}");
}

#[test]
fn last_block_weights_are_exported() {
    let (toy, clip) = pair(7);
    let want = toy.last_block();
    let got = clip.last_block();
    assert_eq!(got.heads, want.heads);
    assert_eq!(got.query, want.query);
    assert_eq!(got.out, want.out);
    assert_eq!(got.joint.projection, want.joint.projection);
    assert_eq!(got.pre_norm.weight, want.pre_norm.weight);
}

#[test]
fn taps_do_not_perturb_the_forward_pass() {
    let (_, clip) = pair(11);
    let x = input();
    let plain = clip.forward_class_embedding(&x, false).unwrap();
    let tapped = clip.forward_class_embedding(&x, true).unwrap();
    assert_eq!(plain, tapped);
}

#[test]
fn tapped_embeddings_feed_the_next_block() {
    let (_, clip) = pair(13);
    let trace = clip.trace(&input(), HeadPolicy::Mean).unwrap();
    let (a, b) = (&trace.layers[0], &trace.layers[1]);
    let next = clip.block_forward(1, a.embeddings.data()).unwrap();
    assert!(max_diff(&next, b.embeddings.data()) < 1e-5);
}

#[test]
fn trace_covers_all_but_the_last_block_with_stochastic_maps() {
    let (_, clip) = pair(17);
    let trace = clip.trace(&input(), HeadPolicy::Mean).unwrap();
    assert_eq!(trace.layers.len(), clip.config().depth - 1);
    for l in &trace.layers {
        let m = l.attention.averaged().unwrap();
        assert_eq!(m.tokens(), 7);
        assert!(m.max_row_deviation() < 1e-4);
    }
}

#[test]
fn loads_from_a_safetensors_file() {
    let toy = ToyVit::random(toy_config(), 19).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.safetensors");
    candle_core::safetensors::save(&hf_tensors(&toy), &path).unwrap();
    let clip = ClipVision::from_file(&path, vision_config(&toy.config), "toy", &Device::Cpu).unwrap();
    let x = input();
    let got = clip.forward_class_embedding(&x, false).unwrap();
    assert!(max_diff(&got, &toy.forward_class_embedding(&x).unwrap()) < 1e-5);
}

#[test]
fn missing_tensors_are_environment_errors() {
    let toy = ToyVit::random(toy_config(), 23).unwrap();
    let mut m = hf_tensors(&toy);
    m.remove("visual_projection.weight");
    let vb = VarBuilder::from_tensors(m, DType::F32, &Device::Cpu);
    let err = ClipVision::load(vb, vision_config(&toy.config), "toy").err().unwrap();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn wrong_patch_size_is_rejected() {
    let (_, clip) = pair(29);
    let mut x = input();
    x.patch = 2;
    assert!(clip.trace(&x, HeadPolicy::Mean).is_err());
}

#[test]
fn published_backbone_shapes() {
    let b = VisionConfig::vit_b_16();
    assert_eq!((b.patch, b.width, b.heads, b.depth, b.joint_width), (16, 768, 12, 12, 512));
    assert_eq!(b.head_dim(), 64);
    // a 336px short side on 16px patches: 21x21 grid plus the class token
    assert_eq!((336 / b.patch).pow(2) + 1, 442);
    assert_eq!(b.depth - 1, 11);
    let l = VisionConfig::vit_l_14();
    assert_eq!((l.patch, l.width, l.heads, l.depth, l.joint_width), (14, 1024, 16, 24, 768));
    assert_eq!(l.grid.0 * l.grid.1 + 1, 257);
    assert!(VisionConfig::for_backbone("vit_h_14").is_err());
}
