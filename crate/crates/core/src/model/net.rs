//! Forward pass of the denoiser `S(x_t, t, c)`.
//!
//! Tokens are one per (joint, frame) and stored joint-major, `[J, f, L]`, so
//! every per-joint map is a batched matrix product over the joint axis.

use std::rc::Rc;

use super::text::TextCondition;
use super::{DenoiserWeights, JOINT_CHANNELS};
use crate::autodiff::{Graph, Tensor, Var};
use crate::control::AgentControl;
use crate::error::{Error, Result};
use crate::motion::ReprLayout;

const LN_EPS: f64 = 1e-5;

/// Constant (non-trainable) inputs of one forward pass.
pub(crate) struct Inputs {
    tokens: Tensor,
    control: Tensor,
    mask: Tensor,
    inv_mask: Tensor,
    time: Tensor,
    text: Tensor,
}

fn to_joint_major(data: &[f64], f: usize, j: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..f {
        for jj in 0..j {
            let src = (i * j + jj) * c;
            let dst = (jj * f + i) * c;
            out[dst..dst + c].copy_from_slice(&data[src..src + c]);
        }
    }
    out
}

fn to_frame_major(data: &[f64], f: usize, j: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for jj in 0..j {
        for i in 0..f {
            let src = (jj * f + i) * c;
            let dst = (i * j + jj) * c;
            out[dst..dst + c].copy_from_slice(&data[src..src + c]);
        }
    }
    out
}

/// Sinusoidal embedding of an integer timestep.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[k] = a.sin();
        out[half + k] = a.cos();
    }
    out
}

/// Per-joint token channels of a `f x D` frame sequence, with a trailing
/// constant-1 bias channel: `[J, f, JOINT_CHANNELS + 1]`.
fn joint_tokens(x: &[f64], f: usize, layout: &ReprLayout) -> Tensor {
    let (j, d) = (layout.joints(), layout.dim());
    let chans = layout.joint_channels();
    let c1 = JOINT_CHANNELS + 1;
    let mut out = vec![0.0; j * f * c1];
    for (jj, ch) in chans.iter().enumerate() {
        for i in 0..f {
            let dst = (jj * f + i) * c1;
            for (s, &k) in ch.iter().enumerate() {
                out[dst + s] = x[i * d + k];
            }
            out[dst + JOINT_CHANNELS] = 1.0;
        }
    }
    Tensor::from_vec(&[j, f, c1], out)
}

/// Gather map from the head output `[J, f, JOINT_CHANNELS]` to `[f, D]`.
fn output_index(f: usize, layout: &ReprLayout) -> Rc<[Option<u32>]> {
    let d = layout.dim();
    let mut idx = vec![None; f * d];
    for (jj, ch) in layout.joint_channels().iter().enumerate() {
        for i in 0..f {
            for (s, &k) in ch.iter().enumerate() {
                idx[i * d + k] = Some(((jj * f + i) * JOINT_CHANNELS + s) as u32);
            }
        }
    }
    idx.into()
}

fn mask_tensors(mask: &[f64], f: usize, j: usize, l: usize) -> (Tensor, Tensor) {
    let mut m = vec![0.0; j * f * l];
    let mut inv = vec![0.0; j * f * l];
    for jj in 0..j {
        for i in 0..f {
            let v = mask[i * j + jj];
            let o = (jj * f + i) * l;
            m[o..o + l].fill(v);
            inv[o..o + l].fill(1.0 - v);
        }
    }
    (Tensor::from_vec(&[j, f, l], m), Tensor::from_vec(&[j, f, l], inv))
}

fn control_tensor(targets: &[f64], f: usize, j: usize) -> Tensor {
    let mut out = vec![0.0; j * f * 4];
    for jj in 0..j {
        for i in 0..f {
            let src = (i * j + jj) * 3;
            let dst = (jj * f + i) * 4;
            out[dst..dst + 3].copy_from_slice(&targets[src..src + 3]);
            out[dst + 3] = 1.0;
        }
    }
    Tensor::from_vec(&[j, f, 4], out)
}

fn check_binary(mask: &[f64]) -> Result<()> {
    if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::validation("mask values must be 0 or 1"));
    }
    Ok(())
}

impl Inputs {
    pub(crate) fn new(
        w: &DenoiserWeights,
        x_t: &[f64],
        t: usize,
        text: &TextCondition,
        control: &AgentControl,
    ) -> Result<Self> {
        let cfg = &w.config;
        let (f, j, l) = (cfg.frames, cfg.joints, cfg.latent);
        let layout = w.layout();
        if x_t.len() != f * layout.dim() {
            return Err(Error::shape("denoise_forward x_t", &[f, layout.dim()], &[x_t.len()]));
        }
        if x_t.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("x_t contains NaN or infinite values"));
        }
        if control.frames != f || control.joints != j {
            return Err(Error::shape("denoise_forward control", &[f, j], &[control.frames, control.joints]));
        }
        control.validate()?;
        if text.embedding.len() != cfg.text_dim {
            return Err(Error::shape("denoise_forward text", &[cfg.text_dim], &[text.embedding.len()]));
        }
        if text.embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("text embedding contains NaN or infinite values"));
        }
        let (mask, inv_mask) = mask_tensors(&control.mask, f, j, l);
        // uncontrolled targets are never read; zero them so stale values
        // cannot leak through a non-finite product
        let targets: Vec<f64> = control
            .targets
            .iter()
            .enumerate()
            .map(|(k, &v)| if control.mask[k / 3] == 1.0 { v } else { 0.0 })
            .collect();
        let text = if text.null {
            vec![0.0; cfg.text_dim]
        } else {
            text.embedding.clone()
        };
        Ok(Inputs {
            tokens: joint_tokens(x_t, f, &layout),
            control: control_tensor(&targets, f, j),
            mask,
            inv_mask,
            time: Tensor::from_vec(&[1, cfg.time_dim], timestep_embedding(t, cfg.time_dim)),
            text: Tensor::from_vec(&[1, cfg.text_dim], text),
        })
    }
}

/// Maps parameter names to graph variables.
pub(crate) struct Params<'a> {
    w: &'a DenoiserWeights,
    vars: Vec<Var>,
}

impl<'a> Params<'a> {
    pub(crate) fn constants(g: &mut Graph, w: &'a DenoiserWeights) -> Self {
        let vars = w.tensors().iter().map(|t| g.constant(t.clone())).collect();
        Params { w, vars }
    }

    pub(crate) fn trainable(g: &mut Graph, w: &'a DenoiserWeights) -> Self {
        let vars = w.tensors().iter().map(|t| g.param(t.clone())).collect();
        Params { w, vars }
    }

    pub(crate) fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn get(&self, name: &str) -> Var {
        self.vars[self.w.index_of(name).unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }
}

/// `M * E^s(c) + (1 - M) * c_temp + E^x(x)` on joint-major tensors.
fn mixing_graph(g: &mut Graph, p: &Params, tokens: Var, control: Var, mask: Var, inv_mask: Var) -> Var {
    let ex = g.bmm(tokens, p.get("enc.x"), false, false);
    let es = g.bmm(control, p.get("enc.s"), false, false);
    let gated = g.mul(es, mask);
    let templ = g.mul(p.get("template"), inv_mask);
    let s = g.add(gated, templ);
    g.add(s, ex)
}

/// Efficient attention with one head per joint, followed by the output
/// projection and cross-joint mixing.
fn attention_graph(g: &mut Graph, p: &Params, block: usize, h: Var, mask: Var, inv_mask: Var) -> Var {
    let b = |n: &str| format!("block{block}.{n}");
    let qm = g.mul(p.get("emb.q_mask"), mask);
    let qc = g.mul(p.get("emb.q_control"), inv_mask);
    let eq = g.add(qm, qc);
    let vm = g.mul(p.get("emb.v_mask"), mask);
    let vc = g.mul(p.get("emb.v_control"), inv_mask);
    let ev = g.add(vm, vc);
    let hq = g.add(h, eq);
    let hv = g.add(h, ev);
    let q = g.bmm(hq, p.get(&b("wq")), false, false);
    let k = g.bmm(h, p.get(&b("wk")), false, false);
    let v = g.bmm(hv, p.get(&b("wv")), false, false);
    // queries normalized over features, keys over positions
    let q = g.softmax_last(q);
    let kt = g.transpose_last2(k);
    let kt = g.softmax_last(kt);
    let ctx = g.bmm(kt, v, false, false);
    let att = g.bmm(q, ctx, false, false);
    let o = g.bmm(att, p.get(&b("wo")), false, false);
    g.matmul_left(p.get(&b("mix")), o)
}

fn block_graph(g: &mut Graph, p: &Params, block: usize, x: Var, mask: Var, inv_mask: Var) -> Var {
    let b = |n: &str| format!("block{block}.{n}");
    let h = g.layer_norm(x, LN_EPS);
    let a = attention_graph(g, p, block, h, mask, inv_mask);
    let x = g.add(x, a);
    let h = g.layer_norm(x, LN_EPS);
    let h = g.linear(h, p.get(&b("ff1")));
    let h = g.add_bcast(h, p.get(&b("ff1_b")));
    let h = g.silu(h);
    let h = g.linear(h, p.get(&b("ff2")));
    let h = g.add_bcast(h, p.get(&b("ff2_b")));
    g.add(x, h)
}

/// Full forward pass; returns the `[f, D]` clean-sample prediction.
pub(crate) fn forward_graph(g: &mut Graph, p: &Params, inp: &Inputs) -> Var {
    let cfg = &p.w.config;
    let tokens = g.constant(inp.tokens.clone());
    let control = g.constant(inp.control.clone());
    let mask = g.constant(inp.mask.clone());
    let inv_mask = g.constant(inp.inv_mask.clone());
    let mut x = mixing_graph(g, p, tokens, control, mask, inv_mask);

    let time = g.constant(inp.time.clone());
    let te = g.linear(time, p.get("time.w1"));
    let te = g.add_bcast(te, p.get("time.b1"));
    let te = g.silu(te);
    let te = g.linear(te, p.get("time.w2"));
    let te = g.add_bcast(te, p.get("time.b2"));
    let text = g.constant(inp.text.clone());
    let ce = g.linear(text, p.get("text.w"));
    let ce = g.add_bcast(ce, p.get("text.b"));
    let cond = g.add(te, ce);
    x = g.add_bcast(x, cond);

    for b in 0..cfg.blocks {
        x = block_graph(g, p, b, x, mask, inv_mask);
    }
    let h = g.layer_norm(x, LN_EPS);
    let out = g.bmm(h, p.get("head.w"), false, false);
    let out = g.add_joint_bias(out, p.get("head.b"));
    let layout = p.w.layout();
    g.gather(out, output_index(cfg.frames, &layout), &[cfg.frames, layout.dim()])
}

/// Predicts the clean sample from `x_t` at (original) timestep `t`.
///
/// Inputs and outputs live in the model's normalized coordinates (see
/// [`super::Normalizer`]); control targets are in meters, in the agent's
/// first-frame root frame.
pub fn denoise_forward(
    w: &DenoiserWeights,
    x_t: &[f64],
    t: usize,
    text: &TextCondition,
    control: &AgentControl,
) -> Result<Vec<f64>> {
    let inp = Inputs::new(w, x_t, t, text, control)?;
    let mut g = Graph::new();
    let p = Params::constants(&mut g, w);
    let out = forward_graph(&mut g, &p, &inp);
    Ok(g.value(out).data().to_vec())
}

/// Joint-wise control injection on frame-major arrays.
///
/// `tokens` is `f x J x JOINT_CHANNELS`, `targets` `f x J x 3`, `mask`
/// `f x J`; the result is `f x J x L`.
pub fn input_mixing(w: &DenoiserWeights, tokens: &[f64], targets: &[f64], mask: &[f64]) -> Result<Vec<f64>> {
    let (f, j, l) = (w.config.frames, w.config.joints, w.config.latent);
    if tokens.len() != f * j * JOINT_CHANNELS || targets.len() != f * j * 3 || mask.len() != f * j {
        return Err(Error::shape(
            "input_mixing",
            &[f * j * JOINT_CHANNELS, f * j * 3, f * j],
            &[tokens.len(), targets.len(), mask.len()],
        ));
    }
    check_binary(mask)?;
    let mut padded = vec![0.0; f * j * (JOINT_CHANNELS + 1)];
    for (dst, src) in padded.chunks_mut(JOINT_CHANNELS + 1).zip(tokens.chunks(JOINT_CHANNELS)) {
        dst[..JOINT_CHANNELS].copy_from_slice(src);
        dst[JOINT_CHANNELS] = 1.0;
    }
    let tok = Tensor::from_vec(&[j, f, JOINT_CHANNELS + 1], to_joint_major(&padded, f, j, JOINT_CHANNELS + 1));
    let (m, inv) = mask_tensors(mask, f, j, l);
    let mut g = Graph::new();
    let p = Params::constants(&mut g, w);
    let tok = g.constant(tok);
    let ctrl = g.constant(control_tensor(targets, f, j));
    let m = g.constant(m);
    let inv = g.constant(inv);
    let out = mixing_graph(&mut g, &p, tok, ctrl, m, inv);
    Ok(to_frame_major(g.value(out).data(), f, j, l))
}

/// Attention sublayer of block `block` on frame-major `f x J x L` latents.
pub fn control_attention(w: &DenoiserWeights, block: usize, latent: &[f64], mask: &[f64]) -> Result<Vec<f64>> {
    let (f, j, l) = (w.config.frames, w.config.joints, w.config.latent);
    if block >= w.config.blocks {
        return Err(Error::validation(format!("block {block} out of range")));
    }
    if latent.len() != f * j * l || mask.len() != f * j {
        return Err(Error::shape("control_attention", &[f * j * l, f * j], &[latent.len(), mask.len()]));
    }
    check_binary(mask)?;
    let (m, inv) = mask_tensors(mask, f, j, l);
    let mut g = Graph::new();
    let p = Params::constants(&mut g, w);
    let h = g.constant(Tensor::from_vec(&[j, f, l], to_joint_major(latent, f, j, l)));
    let m = g.constant(m);
    let inv = g.constant(inv);
    let out = attention_graph(&mut g, &p, block, h, m, inv);
    Ok(to_frame_major(g.value(out).data(), f, j, l))
}

/// Gated query and value embeddings `(emb_Q, emb_V)`, frame-major `f x J x L`.
pub fn gated_embeddings(w: &DenoiserWeights, mask: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (f, j, l) = (w.config.frames, w.config.joints, w.config.latent);
    if mask.len() != f * j {
        return Err(Error::shape("gated_embeddings", &[f * j], &[mask.len()]));
    }
    check_binary(mask)?;
    let mix = |a: &Tensor, b: &Tensor| {
        let mut out = vec![0.0; j * f * l];
        for jj in 0..j {
            for i in 0..f {
                let m = mask[i * j + jj];
                let o = (jj * f + i) * l;
                for k in o..o + l {
                    out[k] = a.data()[k] * m + b.data()[k] * (1.0 - m);
                }
            }
        }
        to_frame_major(&out, f, j, l)
    };
    Ok((
        mix(w.get("emb.q_mask"), w.get("emb.q_control")),
        mix(w.get("emb.v_mask"), w.get("emb.v_control")),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(frames: usize, joints: usize, latent: usize) -> DenoiserWeights {
        let cfg = ModelConfig {
            frames,
            joints,
            latent,
            blocks: 2,
            text_dim: 8,
            time_dim: 8,
            ffn_mult: 2,
        };
        DenoiserWeights::init(cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn layout_transposes_invert() {
        let d: Vec<f64> = (0..24).map(f64::from).collect();
        assert_eq!(to_frame_major(&to_joint_major(&d, 3, 4, 2), 3, 4, 2), d);
    }

    #[test]
    fn output_index_covers_every_channel() {
        let layout = ReprLayout::new(4);
        let idx = output_index(3, &layout);
        assert!(idx.iter().all(Option::is_some));
        let mut seen: Vec<u32> = idx.iter().map(|i| i.unwrap()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 3 * layout.dim());
    }

    #[test]
    fn deterministic_forward_and_nan_rejection() {
        let w = small(5, 4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 5 * w.layout().dim());
        let text = TextCondition {
            embedding: random(&mut rng, 8),
            null: false,
        };
        let ctrl = AgentControl::empty(5, 4);
        let a = denoise_forward(&w, &x, 10, &text, &ctrl).unwrap();
        let b = denoise_forward(&w, &x, 10, &text, &ctrl).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), x.len());
        let mut bad = x.clone();
        bad[3] = f64::NAN;
        assert!(denoise_forward(&w, &bad, 10, &text, &ctrl).unwrap_err().is_validation());
        let null = denoise_forward(&w, &x, 10, &text.to_null(), &ctrl).unwrap();
        assert_ne!(a, null);
    }

    #[test]
    fn single_frame_attention_is_finite() {
        let w = small(1, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lat = random(&mut rng, 12);
        let out = control_attention(&w, 0, &lat, &[1.0, 0.0, 1.0]).unwrap();
        assert_eq!(out.len(), 12);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mask_flip_changes_embedding_at_one_entry() {
        let w = small(4, 3, 4);
        let mut mask = vec![0.0; 12];
        let (q0, v0) = gated_embeddings(&w, &mask).unwrap();
        mask[5] = 1.0;
        let (q1, v1) = gated_embeddings(&w, &mask).unwrap();
        for cell in 0..12 {
            let same = q0[cell * 4..cell * 4 + 4] == q1[cell * 4..cell * 4 + 4]
                && v0[cell * 4..cell * 4 + 4] == v1[cell * 4..cell * 4 + 4];
            assert_eq!(same, cell != 5, "cell {cell}");
        }
    }

    #[test]
    fn non_binary_mask_is_rejected() {
        let w = small(2, 2, 4);
        let err = input_mixing(&w, &vec![0.0; 2 * 2 * JOINT_CHANNELS], &[0.0; 12], &[0.0, 0.3, 1.0, 0.0]);
        assert!(err.unwrap_err().is_validation());
    }
}
