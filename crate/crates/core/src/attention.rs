//! Multi-head self-attention, score scaling modes, and position encodings.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::attention::head_logits;
use crate::par;
use crate::real::Real;
use crate::tensor::Tensor;

/// Default PB-Relax temperature `α`.
pub const DEFAULT_PB_RELAX_ALPHA: f64 = 32.0;

/// How attention logits are formed from `Q` and `K` (head dimension `d`).
///
/// * `Standard`: `QKᵀ/√d`
/// * `PreNorm`: `(Q/d^¼)(K/d^¼)ᵀ`
/// * `FullNorm`: `(Q/√d)(K/√d)ᵀ`
/// * `PbRelax`: `α·((Q/(α√d))Kᵀ − rowmax)`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScalingMode {
    #[default]
    Standard,
    PreNorm,
    FullNorm,
    PbRelax { alpha: f64 },
}

impl ScalingMode {
    pub const ALL_NAMES: [&'static str; 4] = ["standard", "prenorm", "fullnorm", "pb_relax"];

    pub fn name(&self) -> &'static str {
        match self {
            ScalingMode::Standard => "standard",
            ScalingMode::PreNorm => "prenorm",
            ScalingMode::FullNorm => "fullnorm",
            ScalingMode::PbRelax { .. } => "pb_relax",
        }
    }

    /// Parses a mode name; `pb_relax` takes `alpha`.
    pub fn parse(name: &str, alpha: f64) -> Result<Self> {
        match name {
            "standard" => Ok(ScalingMode::Standard),
            "prenorm" | "pre_norm" => Ok(ScalingMode::PreNorm),
            "fullnorm" | "full_norm" => Ok(ScalingMode::FullNorm),
            "pb_relax" | "pbrelax" => {
                if !(alpha.is_finite() && alpha > 0.0) {
                    return Err(Error::invalid("scaling mode", format!("pb_relax alpha must be positive, got {alpha}")));
                }
                Ok(ScalingMode::PbRelax { alpha })
            }
            other => Err(Error::invalid(
                "scaling mode",
                format!("unknown mode `{other}` (expected one of {:?})", Self::ALL_NAMES),
            )),
        }
    }

    pub fn all(alpha: f64) -> [ScalingMode; 4] {
        [
            ScalingMode::Standard,
            ScalingMode::PreNorm,
            ScalingMode::FullNorm,
            ScalingMode::PbRelax { alpha },
        ]
    }
}

/// Attention logits `[N, h, T, T]` from `Q, K` of shape `[N, h, T, d]`.
pub fn attention_logits<T: Real>(q: &Tensor<T>, k: &Tensor<T>, mode: ScalingMode) -> Result<Tensor<T>> {
    const OP: &str = "attention_logits";
    q.ensure_rank(OP, 4)?;
    k.ensure_dims(OP, "K", q.dims())?;
    if !q.is_finite() || !k.is_finite() {
        return Err(Error::NonFinite {
            op: "attention_logits (input)",
            layer: None,
        });
    }
    let (n, h, t, d) = q.nchw();
    let rows = par::map_range(n * h, |nh| {
        let mut s = vec![T::zero(); t * t];
        let sl = nh * t * d..(nh + 1) * t * d;
        head_logits(mode, t, d, &q.data()[sl.clone()], &k.data()[sl], &mut s);
        s
    });
    let out = Tensor::new(&[n, h, t, t], rows.concat())?;
    if !out.is_finite() {
        return Err(Error::NonFinite { op: OP, layer: None });
    }
    Ok(out)
}

/// Weights of one attention layer. `w_qkv` is `[3A, C]` and `w_proj` is
/// `[C, A]` with `A = heads·head_dim`.
#[derive(Clone, Debug)]
pub struct AttentionParams<T: Real = f32> {
    pub w_qkv: Tensor<T>,
    pub b_qkv: Option<Tensor<T>>,
    pub w_proj: Tensor<T>,
    pub b_proj: Option<Tensor<T>>,
    pub heads: usize,
    pub head_dim: usize,
    pub mode: ScalingMode,
}

impl<T: Real> AttentionParams<T> {
    pub fn attn_dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Tape handles for the weights of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_qkv: Var,
    pub b_qkv: Option<Var>,
    pub w_proj: Var,
    pub b_proj: Option<Var>,
}

/// Records MHSA on `tape`: `x[N, C, H, W]` -> `[N, C, H, W]`.
pub fn mhsa<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    w: AttentionVars,
    bias: Option<Var>,
    heads: usize,
    head_dim: usize,
    mode: ScalingMode,
) -> Result<Var> {
    const OP: &str = "mhsa";
    tape.value(x).ensure_rank(OP, 4)?;
    let c = tape.dims(x)[1];
    let a = heads * head_dim;
    tape.value(w.w_qkv).ensure_dims(OP, "w_qkv", &[3 * a, c])?;
    tape.value(w.w_proj).ensure_dims(OP, "w_proj", &[c, a])?;
    let wq = tape.reshape(w.w_qkv, &[3 * a, c, 1, 1])?;
    let qkv = tape.conv2d(x, wq, w.b_qkv, 1, 0, 1)?;
    let o = tape.attention(qkv, bias, heads, head_dim, mode)?;
    let wp = tape.reshape(w.w_proj, &[c, a, 1, 1])?;
    tape.conv2d(o, wp, w.b_proj, 1, 0, 1)
}

/// Pure MHSA on tensors.
pub fn mhsa_forward<T: Real>(x: &Tensor<T>, p: &AttentionParams<T>, bias: Option<&RelPosBiasTable<T>>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = AttentionVars {
        w_qkv: tape.constant(p.w_qkv.clone()),
        b_qkv: p.b_qkv.clone().map(|b| tape.constant(b)),
        w_proj: tape.constant(p.w_proj.clone()),
        b_proj: p.b_proj.clone().map(|b| tape.constant(b)),
    };
    let bias = match bias {
        Some(table) => {
            if x.rank() == 4 && (x.dims()[2], x.dims()[3]) != (table.window_h, table.window_w) {
                return Err(Error::dim(
                    "mhsa_forward",
                    "bias window",
                    format!("{}x{}", x.dims()[2], x.dims()[3]),
                    format!("{}x{}", table.window_h, table.window_w),
                ));
            }
            Some(tape.constant(rel_pos_bias(table, table.tokens())?))
        }
        None => None,
    };
    let y = mhsa(&mut tape, xv, w, bias, p.heads, p.head_dim, p.mode)?;
    Ok(tape.value(y).clone())
}

/// Learned relative position bias for a `window_h × window_w` token grid.
/// `table` is `[(2h−1)(2w−1), heads]`.
#[derive(Clone, Debug)]
pub struct RelPosBiasTable<T: Real = f32> {
    pub window_h: usize,
    pub window_w: usize,
    pub heads: usize,
    pub table: Tensor<T>,
}

/// Number of distinct relative offsets of a `h × w` grid.
pub fn rel_table_rows(h: usize, w: usize) -> usize {
    (2 * h - 1) * (2 * w - 1)
}

/// Table row for the offset between tokens `i` and `j` (row-major positions).
pub fn offset_index(window_w: usize, window_h: usize, i: usize, j: usize) -> usize {
    let (yi, xi) = (i / window_w, i % window_w);
    let (yj, xj) = (j / window_w, j % window_w);
    let dy = yi + window_h - 1 - yj;
    let dx = xi + window_w - 1 - xj;
    dy * (2 * window_w - 1) + dx
}

/// Flat indices into a `[rows, heads]` table producing `bias[heads, T, T]`.
pub fn rel_bias_index(window_h: usize, window_w: usize, heads: usize) -> Vec<usize> {
    let t = window_h * window_w;
    let mut idx = Vec::with_capacity(heads * t * t);
    for h in 0..heads {
        for i in 0..t {
            for j in 0..t {
                idx.push(offset_index(window_w, window_h, i, j) * heads + h);
            }
        }
    }
    idx
}

impl<T: Real> RelPosBiasTable<T> {
    pub fn new(window_h: usize, window_w: usize, heads: usize, table: Tensor<T>) -> Result<Self> {
        if window_h == 0 || window_w == 0 || heads == 0 {
            return Err(Error::invalid("rel_pos_bias", "window and heads must be positive"));
        }
        table.ensure_dims("rel_pos_bias", "table", &[rel_table_rows(window_h, window_w), heads])?;
        Ok(Self {
            window_h,
            window_w,
            heads,
            table,
        })
    }

    pub fn zeros(window_h: usize, window_w: usize, heads: usize) -> Self {
        let table = Tensor::zeros(&[rel_table_rows(window_h, window_w), heads]);
        Self::new(window_h, window_w, heads, table).expect("valid dims")
    }

    pub fn tokens(&self) -> usize {
        self.window_h * self.window_w
    }
}

/// Expands the table to `bias[heads, T, T]`; `tokens` must equal the window area.
pub fn rel_pos_bias<T: Real>(table: &RelPosBiasTable<T>, tokens: usize) -> Result<Tensor<T>> {
    if tokens != table.tokens() {
        return Err(Error::dim("rel_pos_bias", "tokens", table.tokens(), tokens));
    }
    let data = table.table.data();
    let vals = rel_bias_index(table.window_h, table.window_w, table.heads)
        .into_iter()
        .map(|i| data[i])
        .collect();
    Tensor::new(&[table.heads, tokens, tokens], vals)
}

/// Learned absolute position table `[C, H, W]`.
#[derive(Clone, Debug)]
pub struct AbsPosEmbedding<T: Real = f32> {
    pub table: Tensor<T>,
}

pub fn add_abs_pos<T: Real>(x: &Tensor<T>, e: &AbsPosEmbedding<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let ev = tape.constant(e.table.clone());
    let y = tape.add_broadcast(xv, ev)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_standard_logit() {
        let q = Tensor::<f64>::new(&[1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
        let s = attention_logits(&q, &q, ScalingMode::Standard).unwrap();
        assert!((s.item() - 1.0 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn offsets_of_two_by_one_window() {
        // window_h = 2, window_w = 1: token 0 above token 1
        let a = offset_index(1, 2, 0, 1);
        let b = offset_index(1, 2, 1, 0);
        let zero = offset_index(1, 2, 0, 0);
        assert_eq!((a, zero, b), (0, 1, 2));
    }

    #[test]
    fn one_by_one_window_broadcasts_single_entry() {
        let t = RelPosBiasTable::new(1, 1, 3, Tensor::<f32>::from_f64(&[1, 3], &[0.5, -1.0, 2.0]).unwrap()).unwrap();
        let b = rel_pos_bias(&t, 1).unwrap();
        assert_eq!(b.dims(), &[3, 1, 1]);
        assert_eq!(b.data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn token_mismatch_is_rejected() {
        let t = RelPosBiasTable::<f32>::zeros(2, 2, 1);
        assert!(matches!(rel_pos_bias(&t, 5), Err(Error::Dim { .. })));
    }

    #[test]
    fn parse_modes() {
        assert_eq!(ScalingMode::parse("prenorm", 1.0).unwrap(), ScalingMode::PreNorm);
        assert_eq!(
            ScalingMode::parse("pb_relax", 8.0).unwrap(),
            ScalingMode::PbRelax { alpha: 8.0 }
        );
        assert!(ScalingMode::parse("bogus", 1.0).is_err());
        assert!(ScalingMode::parse("pb_relax", 0.0).is_err());
    }
}
