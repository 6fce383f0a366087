//! Patchification, patch embedding and the pre-norm ViT encoder.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bindings, ParamSet};
use crate::rng::{stream, truncated_normal};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

/// Splits an `H×W×C` image into `N` raster-ordered rows of `m·m·C` values.
pub fn patchify(image: &Tensor, m: usize) -> Result<Tensor> {
    let (h, w, c) = match image.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::dim(format!("patchify expects H×W×C, got {s:?}"))),
    };
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::dim(format!("image {h}×{w} is not divisible by patch size {m}")));
    }
    let (rows, cols) = (h / m, w / m);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for pr in 0..rows {
        for pc in 0..cols {
            for dy in 0..m {
                let start = ((pr * m + dy) * w + pc * m) * c;
                out.extend_from_slice(&src[start..start + m * c]);
            }
        }
    }
    Tensor::new(vec![rows * cols, m * m * c], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, grid: (usize, usize), m: usize, channels: usize) -> Result<Tensor> {
    let (rows, cols) = grid;
    let (n, p) = patches.dims2()?;
    if n != rows * cols || p != m * m * channels {
        return Err(Error::dim(format!(
            "patches {:?} do not fit a {rows}×{cols} grid of {m}×{m}×{channels} patches",
            patches.shape()
        )));
    }
    let (h, w) = (rows * m, cols * m);
    let mut out = vec![0.0; h * w * channels];
    for (i, patch) in patches.data().chunks_exact(p).enumerate() {
        let (pr, pc) = (i / cols, i % cols);
        for dy in 0..m {
            let dst = ((pr * m + dy) * w + pc * m) * channels;
            out[dst..dst + m * channels].copy_from_slice(&patch[dy * m * channels..(dy + 1) * m * channels]);
        }
    }
    Tensor::new(vec![h, w, channels], out)
}

/// Row-major patch coordinates `(row, col)` for raster index `i`.
pub fn grid_coords(i: usize, cols: usize) -> (usize, usize) {
    (i / cols, i % cols)
}

fn init_tensor(seed: u64, name: &str, shape: &[usize]) -> Tensor {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    let zero = leaf == "bias"
        || leaf == "beta"
        || name == "pos_embed"
        || name == "head.weight"
        || leaf == "classifier";
    if zero {
        return Tensor::zeros(shape);
    }
    if leaf == "gamma" {
        return Tensor::ones(shape);
    }
    let mut rng = stream(seed, &format!("init/{name}"), &[]);
    Tensor::from_fn(shape, |_| truncated_normal(&mut rng, INIT_STD))
}

/// Parameter shapes of one pre-norm transformer block of width `d` and MLP width `hidden`.
pub(crate) fn block_shapes(prefix: &str, d: usize, hidden: usize) -> Vec<(String, Vec<usize>)> {
    let p = |s: &str| format!("{prefix}.{s}");
    vec![
        (p("norm1.gamma"), vec![d]),
        (p("norm1.beta"), vec![d]),
        (p("attn.wq"), vec![d, d]),
        (p("attn.wk"), vec![d, d]),
        (p("attn.wv"), vec![d, d]),
        (p("attn.proj.weight"), vec![d, d]),
        (p("attn.proj.bias"), vec![d]),
        (p("norm2.gamma"), vec![d]),
        (p("norm2.beta"), vec![d]),
        (p("mlp.fc1.weight"), vec![d, hidden]),
        (p("mlp.fc1.bias"), vec![hidden]),
        (p("mlp.fc2.weight"), vec![hidden, d]),
        (p("mlp.fc2.bias"), vec![d]),
    ]
}

/// Shapes of the encoder, its optional positional encoding, and the classifier.
pub fn encoder_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.embed_dim;
    let mut shapes = vec![
        ("patch_embed.weight".to_string(), vec![cfg.patch_dim(), d]),
        ("cls_token".to_string(), vec![1, d]),
    ];
    if cfg.use_pe {
        shapes.push(("pos_embed".to_string(), vec![cfg.num_patches() + 1, d]));
    }
    for i in 0..cfg.depth {
        shapes.extend(block_shapes(&format!("blocks.{i}"), d, cfg.mlp_hidden()));
    }
    shapes.push(("norm.gamma".to_string(), vec![d]));
    shapes.push(("norm.beta".to_string(), vec![d]));
    shapes.push(("head.weight".to_string(), vec![d, cfg.num_classes]));
    shapes
}

pub(crate) fn init_shapes(params: &mut ParamSet, seed: u64, shapes: &[(String, Vec<usize>)]) {
    for (name, shape) in shapes {
        params.insert(name.clone(), init_tensor(seed, name, shape));
    }
}

/// Encoder plus classifier parameters. Weights are truncated normal
/// (std 0.02); biases, classifier and positional encoding start at zero.
pub fn init_encoder(cfg: &ModelConfig, seed: u64) -> ParamSet {
    let mut p = ParamSet::new();
    init_shapes(&mut p, seed, &encoder_shapes(cfg));
    p
}

/// Closed-form encoder parameter count, including the classifier.
pub fn encoder_param_count(cfg: &ModelConfig) -> usize {
    let d = cfg.embed_dim;
    let h = cfg.mlp_hidden();
    let per_block = 4 * d * d + 2 * d * h + 6 * d + h;
    let pe = if cfg.use_pe { (cfg.num_patches() + 1) * d } else { 0 };
    cfg.patch_dim() * d + d + pe + cfg.depth * per_block + 2 * d + d * cfg.num_classes
}

/// Patch embeddings with the class token prepended; positional encoding
/// is added iff `use_pe` is set and a `pos_embed` parameter is bound.
pub fn embed(g: &mut Graph, b: &Bindings, patches: Var, cfg: &ModelConfig) -> Result<Var> {
    let (_, p) = g.value(patches).dims2()?;
    if p != cfg.patch_dim() {
        return Err(Error::dim(format!(
            "patch rows have {p} values, config expects {}",
            cfg.patch_dim()
        )));
    }
    let proj = g.matmul(patches, b.var("patch_embed.weight")?)?;
    let tokens = g.concat(&[b.var("cls_token")?, proj], 0)?;
    if !cfg.use_pe {
        return Ok(tokens);
    }
    let pe = b.var("pos_embed")?;
    if g.shape(pe) != g.shape(tokens) {
        return Err(Error::dim(format!(
            "positional encoding {:?} does not match tokens {:?}",
            g.shape(pe),
            g.shape(tokens)
        )));
    }
    g.add(tokens, pe)
}

/// Multi-head self-attention; returns the projected output and the
/// per-head attention matrices.
pub(crate) fn attention(g: &mut Graph, b: &Bindings, prefix: &str, x: Var, heads: usize) -> Result<(Var, Vec<Var>)> {
    let d = g.value(x).dims2()?.1;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = g.matmul(x, b.var(&format!("{prefix}.wq"))?)?;
    let k = g.matmul(x, b.var(&format!("{prefix}.wk"))?)?;
    let v = g.matmul(x, b.var(&format!("{prefix}.wv"))?)?;
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, 1, h * dh, dh)?;
        let kh = g.slice(k, 1, h * dh, dh)?;
        let vh = g.slice(v, 1, h * dh, dh)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale)?;
        let attn = g.softmax(scores, 1)?;
        probs.push(attn);
        outs.push(g.matmul(attn, vh)?);
    }
    let merged = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    let o = g.matmul(merged, b.var(&format!("{prefix}.proj.weight"))?)?;
    Ok((g.add_bias(o, b.var(&format!("{prefix}.proj.bias"))?)?, probs))
}

pub(crate) fn layernorm(g: &mut Graph, b: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let gamma = b.var(&format!("{prefix}.gamma"))?;
    let beta = b.var(&format!("{prefix}.beta"))?;
    g.layernorm(x, gamma, beta, LN_EPS)
}

pub(crate) fn linear(g: &mut Graph, b: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, b.var(&format!("{prefix}.weight"))?)?;
    g.add_bias(y, b.var(&format!("{prefix}.bias"))?)
}

/// Pre-norm block: `x + MHSA(LN(x))`, then `x + MLP(LN(x))`.
pub(crate) fn block(g: &mut Graph, b: &Bindings, prefix: &str, x: Var, heads: usize) -> Result<(Var, Vec<Var>)> {
    let h = layernorm(g, b, &format!("{prefix}.norm1"), x)?;
    let (a, probs) = attention(g, b, &format!("{prefix}.attn"), h, heads)?;
    let x = g.add(x, a)?;
    let h = layernorm(g, b, &format!("{prefix}.norm2"), x)?;
    let h = linear(g, b, &format!("{prefix}.mlp.fc1"), h)?;
    let h = g.gelu(h)?;
    let h = linear(g, b, &format!("{prefix}.mlp.fc2"), h)?;
    Ok((g.add(x, h)?, probs))
}

/// Encoder output together with every attention matrix it computed.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub z: Var,
    pub attention: Vec<Var>,
}

/// Runs `depth` blocks and the final layer norm. Row 0 of the result is
/// `z_class`; rows `1..` are the patch encodings.
pub fn encoder_forward(g: &mut Graph, b: &Bindings, tokens: Var, cfg: &ModelConfig) -> Result<Var> {
    Ok(encoder_forward_traced(g, b, tokens, cfg)?.z)
}

pub fn encoder_forward_traced(g: &mut Graph, b: &Bindings, tokens: Var, cfg: &ModelConfig) -> Result<EncoderTrace> {
    let (_, d) = g.value(tokens).dims2()?;
    if d != cfg.embed_dim {
        return Err(Error::dim(format!("tokens have width {d}, config expects {}", cfg.embed_dim)));
    }
    let mut x = tokens;
    let mut attention = Vec::new();
    for i in 0..cfg.depth {
        let (y, probs) = block(g, b, &format!("blocks.{i}"), x, cfg.heads)?;
        x = y;
        attention.extend(probs);
    }
    let z = layernorm(g, b, "norm", x)?;
    Ok(EncoderTrace { z, attention })
}

/// Linear classifier on the class-token row.
pub fn classify(g: &mut Graph, b: &Bindings, z: Var) -> Result<Var> {
    let z_class = g.slice(z, 0, 0, 1)?;
    g.matmul(z_class, b.var("head.weight")?)
}
