//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op evaluates eagerly, checks its output for NaN/Inf, and appends a
//! node recording its inputs. [`Tape::backward`] walks the nodes in reverse.

use crate::attention::ScalingMode;
use crate::error::{Error, Result};
use crate::kernels::attention::{self as attn_k, AttnGeom};
use crate::kernels::conv::{self, ConvGeom};
use crate::kernels::gemm::{gemm, gemm_nt};
use crate::kernels::norm::{self, Layout};
use crate::kernels::{pointwise, pool};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

enum Op<T> {
    Leaf,
    Param(String),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: Layout,
        mean: Vec<T>,
        invstd: Vec<T>,
        batch_stats: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: Layout,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    GlobalAvgPool {
        x: Var,
        spatial: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBroadcast {
        x: Var,
        e: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Attention {
        qkv: Var,
        bias: Option<Var>,
        geom: AttnGeom,
        mode: ScalingMode,
        probs: Vec<T>,
    },
    Gather {
        table: Var,
        index: Vec<usize>,
    },
    PrependToken {
        x: Var,
        token: Var,
    },
    SelectToken {
        x: Var,
        index: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Running-statistic update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct RunningUpdate<T> {
    pub prefix: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Gradients for every node of a tape, indexed by [`Var`].
pub struct Grads<T> {
    per_node: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn of(&self, v: Var) -> Option<&[T]> {
        self.per_node.get(v.0).and_then(|g| g.as_deref())
    }
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    layer: Option<String>,
    macs: u64,
    trace: Option<Vec<(String, Vec<usize>)>>,
    running_updates: Vec<RunningUpdate<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            layer: None,
            macs: 0,
            trace: None,
            running_updates: Vec::new(),
        }
    }

    /// Records `(layer, output dims)` for every [`Tape::mark`] call.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    /// Multiply-accumulates executed by conv, linear and attention ops so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Sets the layer label attached to non-finite diagnostics.
    pub fn set_layer(&mut self, layer: impl Into<String>) {
        self.layer = Some(layer.into());
    }

    pub fn layer(&self) -> Option<&str> {
        self.layer.as_deref()
    }

    pub fn mark(&mut self, layer: &str, v: Var) {
        if let Some(trace) = self.trace.as_mut() {
            trace.push((layer.to_string(), self.nodes[v.0].value.dims().to_vec()));
        }
    }

    pub fn trace(&self) -> &[(String, Vec<usize>)] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn take_running_updates(&mut self) -> Vec<RunningUpdate<T>> {
        std::mem::take(&mut self.running_updates)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op_name,
                layer: self.layer.clone(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn needs_any(&self, vs: &[Option<Var>]) -> bool {
        vs.iter().flatten().any(|&v| self.needs(v))
    }

    /// Input that takes part in differentiation only if `requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: needs,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Loads a parameter; trainable tensors receive gradients in
    /// [`Tape::backward_into`].
    pub fn param(&mut self, store: &ParamStore<T>, path: &str) -> Result<Var> {
        let t = store.get(path)?;
        let needs = t.requires_grad();
        let value = Tensor::new(t.dims(), t.data().to_vec())?;
        self.nodes.push(Node {
            value,
            op: Op::Param(path.to_string()),
            needs_grad: needs,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.dims(x), self.dims(w), stride, pad, groups)?;
        if let Some(b) = b {
            self.value(b).ensure_dims("conv2d", "bias", &[geom.cout])?;
        }
        let out = conv::forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&geom.out_dims(), out)?;
        self.macs += geom.macs();
        let needs = self.needs_any(&[Some(x), Some(w), b]);
        self.push("conv2d", value, Op::Conv { x, w, b, geom }, needs)
    }

    /// Affine map over the last axis: `x[..., Din] · wᵀ + b`, `w[Dout, Din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let xd = self.dims(x).to_vec();
        let wd = self.dims(w).to_vec();
        if wd.len() != 2 {
            return Err(Error::dim(OP, "weight rank", 2, wd.len()));
        }
        let (dout, din) = (wd[0], wd[1]);
        let last = *xd.last().expect("rank >= 1");
        if last != din {
            return Err(Error::dim(OP, "last axis of input (Din)", din, last));
        }
        if let Some(b) = b {
            self.value(b).ensure_dims(OP, "bias", &[dout])?;
        }
        let rows = self.value(x).numel() / din;
        let mut out = vec![T::zero(); rows * dout];
        gemm_nt(rows, dout, din, self.value(x).data(), self.value(w).data(), &mut out, false);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bd).for_each(|(o, &bv)| *o += bv);
            }
        }
        let mut od = xd.clone();
        *od.last_mut().unwrap() = dout;
        let value = Tensor::new(&od, out)?;
        self.macs += (rows * din * dout) as u64;
        let needs = self.needs_any(&[Some(x), Some(w), b]);
        self.push(
            OP,
            value,
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            },
            needs,
        )
    }

    fn channel_layout(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<Layout> {
        let d = self.dims(x);
        let layout = match d.len() {
            4 => Layout {
                outer: d[0],
                channels: d[1],
                inner: d[2] * d[3],
            },
            2 | 3 => Layout {
                outer: d[..d.len() - 1].iter().product(),
                channels: d[d.len() - 1],
                inner: 1,
            },
            r => return Err(Error::dim(op, "rank", "2, 3 or 4", r)),
        };
        self.value(gamma).ensure_dims(op, "gamma", &[layout.channels])?;
        self.value(beta).ensure_dims(op, "beta", &[layout.channels])?;
        Ok(layout)
    }

    /// Batch normalisation over `[N, C, H, W]`. In training mode the batch
    /// statistics are used and a running-stat update tagged `prefix` is queued
    /// (see [`Tape::take_running_updates`]).
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        training: bool,
        eps: f64,
        momentum: f64,
        prefix: &str,
    ) -> Result<Var> {
        const OP: &str = "batch_norm";
        self.value(x).ensure_rank(OP, 4)?;
        let layout = self.channel_layout(OP, x, gamma, beta)?;
        if running_mean.len() != layout.channels || running_var.len() != layout.channels {
            return Err(Error::dim(OP, "running statistics", layout.channels, running_mean.len()));
        }
        let eps_t = T::of(eps);
        let (mean, var) = if training {
            let m = layout.outer * layout.inner;
            if m < 2 {
                return Err(Error::invalid(
                    OP,
                    "training mode needs at least 2 values per channel (N·H·W >= 2)",
                ));
            }
            let stats = norm::batch_stats(layout, self.value(x).data());
            let unbias = T::of(m as f64 / (m as f64 - 1.0));
            let mom = T::of(momentum);
            let keep = T::one() - mom;
            self.running_updates.push(RunningUpdate {
                prefix: prefix.to_string(),
                mean: running_mean
                    .iter()
                    .zip(&stats.mean)
                    .map(|(&r, &b)| keep * r + mom * b)
                    .collect(),
                var: running_var
                    .iter()
                    .zip(&stats.var)
                    .map(|(&r, &b)| keep * r + mom * b * unbias)
                    .collect(),
            });
            (stats.mean, stats.var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let y = norm::channel_affine(
            layout,
            self.value(x).data(),
            &mean,
            &invstd,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor::new(self.dims(x), y)?;
        let needs = self.needs_any(&[Some(x), Some(gamma), Some(beta)]);
        self.push(
            OP,
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                mean,
                invstd,
                batch_stats: training,
            },
            needs,
        )
    }

    /// Layer normalisation per token: over axis 1 of `[N, C, H, W]`, or over
    /// the last axis of rank-2/3 inputs.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        const OP: &str = "layer_norm";
        let layout = self.channel_layout(OP, x, gamma, beta)?;
        let (y, mean, rstd) = norm::layer_norm(
            layout,
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            T::of(eps),
        );
        let value = Tensor::new(self.dims(x), y)?;
        let needs = self.needs_any(&[Some(x), Some(gamma), Some(beta)]);
        self.push(
            OP,
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                layout,
                mean,
                rstd,
            },
            needs,
        )
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        const OP: &str = "softmax";
        let d = self.dims(x).to_vec();
        if axis >= d.len() {
            return Err(Error::dim(OP, "axis", format!("< {}", d.len()), axis));
        }
        if !self.value(x).is_finite() {
            return Err(Error::NonFinite {
                op: "softmax (input)",
                layer: self.layer.clone(),
            });
        }
        let outer = d[..axis].iter().product();
        let len = d[axis];
        let inner = d[axis + 1..].iter().product();
        let y = pointwise::softmax(outer, len, inner, self.value(x).data());
        let value = Tensor::new(&d, y)?;
        let needs = self.needs(x);
        self.push(OP, value, Op::Softmax { x, outer, len, inner }, needs)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let xs = self.value(x);
        let y: Vec<T> = match kind {
            Activation::Relu => xs.data().iter().map(|&v| v.max(T::zero())).collect(),
            Activation::Gelu => xs.data().iter().map(|&v| pointwise::gelu(v)).collect(),
        };
        let value = Tensor::new(xs.dims(), y)?;
        let needs = self.needs(x);
        self.push("activation", value, Op::Act { x, kind }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Gelu)
    }

    /// `[N, C, H, W] -> [N, C]`
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        const OP: &str = "global_avg_pool";
        self.value(x).ensure_rank(OP, 4)?;
        let (n, c, h, w) = self.value(x).nchw();
        let y = pool::global_avg_pool(n * c, h * w, self.value(x).data());
        let value = Tensor::new(&[n, c], y)?;
        let needs = self.needs(x);
        self.push(OP, value, Op::GlobalAvgPool { x, spatial: h * w }, needs)
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        const OP: &str = "max_pool2d";
        self.value(x).ensure_rank(OP, 4)?;
        if pad >= k {
            return Err(Error::invalid(OP, "padding must be smaller than the window"));
        }
        let (n, c, h, w) = self.value(x).nchw();
        let oh = conv::out_extent(h, k, stride, pad).ok_or_else(|| Error::dim(OP, "height", k, h))?;
        let ow = conv::out_extent(w, k, stride, pad).ok_or_else(|| Error::dim(OP, "width", k, w))?;
        let (y, argmax) = pool::max_pool(n, c, h, w, k, stride, pad, oh, ow, self.value(x).data());
        let value = Tensor::new(&[n, c, oh, ow], y)?;
        let needs = self.needs(x);
        self.push(OP, value, Op::MaxPool { x, argmax }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "add";
        if self.dims(a) != self.dims(b) {
            return Err(Error::dim(
                OP,
                "shape",
                format!("{:?}", self.dims(a)),
                format!("{:?}", self.dims(b)),
            ));
        }
        let y: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        let value = Tensor::new(self.dims(a), y)?;
        let needs = self.needs_any(&[Some(a), Some(b)]);
        self.push(OP, value, Op::Add { a, b }, needs)
    }

    /// `x[N, ...] + e[...]`, broadcasting `e` over the leading axis.
    pub fn add_broadcast(&mut self, x: Var, e: Var) -> Result<Var> {
        const OP: &str = "add_broadcast";
        let xd = self.dims(x).to_vec();
        let ed = self.dims(e).to_vec();
        if xd.len() < 2 || xd[1..] != ed[..] {
            return Err(Error::dim(OP, "trailing shape", format!("{:?}", &xd[1.min(xd.len())..]), format!("{ed:?}")));
        }
        let ev = self.value(e).data();
        let y: Vec<T> = self
            .value(x)
            .data()
            .chunks(ev.len())
            .flat_map(|c| c.iter().zip(ev).map(|(&p, &q)| p + q))
            .collect();
        let value = Tensor::new(&xd, y)?;
        let needs = self.needs_any(&[Some(x), Some(e)]);
        self.push(OP, value, Op::AddBroadcast { x, e }, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "mul";
        if self.dims(a) != self.dims(b) {
            return Err(Error::dim(
                OP,
                "shape",
                format!("{:?}", self.dims(a)),
                format!("{:?}", self.dims(b)),
            ));
        }
        let y: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p * q)
            .collect();
        let value = Tensor::new(self.dims(a), y)?;
        let needs = self.needs_any(&[Some(a), Some(b)]);
        self.push(OP, value, Op::Mul { a, b }, needs)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let y: Vec<T> = self.value(x).data().iter().map(|&v| v * s).collect();
        let value = Tensor::new(self.dims(x), y)?;
        let needs = self.needs(x);
        self.push("scale", value, Op::Scale { x, s }, needs)
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        let needs = self.needs(x);
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, needs)
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(dims)?;
        let needs = self.needs(x);
        self.push("reshape", value, Op::Reshape { x }, needs)
    }

    /// Multi-head attention core: `qkv[N, 3A, H, W] -> [N, A, H, W]` with
    /// `A = heads·head_dim`, tokens taken as the `H·W` spatial positions.
    /// `bias`, if given, is `[heads, T, T]`.
    pub fn attention(&mut self, qkv: Var, bias: Option<Var>, heads: usize, head_dim: usize, mode: ScalingMode) -> Result<Var> {
        const OP: &str = "attention";
        self.value(qkv).ensure_rank(OP, 4)?;
        let (n, c3, h, w) = self.value(qkv).nchw();
        let a = heads * head_dim;
        if heads == 0 || head_dim == 0 {
            return Err(Error::invalid(OP, "heads and head_dim must be positive"));
        }
        if c3 != 3 * a {
            return Err(Error::dim(OP, "qkv channels (3·heads·head_dim)", 3 * a, c3));
        }
        let geom = AttnGeom {
            n,
            heads,
            tokens: h * w,
            head_dim,
        };
        if let Some(b) = bias {
            self.value(b)
                .ensure_dims(OP, "relative bias", &[heads, geom.tokens, geom.tokens])?;
        }
        let (out, probs) = attn_k::forward(&geom, mode, self.value(qkv).data(), bias.map(|b| self.value(b).data()));
        let value = Tensor::new(&[n, a, h, w], out)?;
        self.macs += geom.macs();
        let needs = self.needs_any(&[Some(qkv), bias]);
        self.push(
            OP,
            value,
            Op::Attention {
                qkv,
                bias,
                geom,
                mode,
                probs,
            },
            needs,
        )
    }

    /// `out[i] = table[index[i]]` reshaped to `dims`.
    pub fn gather(&mut self, table: Var, index: Vec<usize>, dims: &[usize]) -> Result<Var> {
        const OP: &str = "gather";
        let tv = self.value(table).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= tv.len()) {
            return Err(Error::dim(OP, "index", format!("< {}", tv.len()), bad));
        }
        let y: Vec<T> = index.iter().map(|&i| tv[i]).collect();
        let value = Tensor::new(dims, y)?;
        let needs = self.needs(table);
        self.push(OP, value, Op::Gather { table, index }, needs)
    }

    /// `[N, C, T, 1]` plus a `[C]` token -> `[N, C, T+1, 1]` with the token first.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        const OP: &str = "prepend_token";
        self.value(x).ensure_rank(OP, 4)?;
        let (n, c, t, w) = self.value(x).nchw();
        if w != 1 {
            return Err(Error::dim(OP, "width of token layout", 1, w));
        }
        self.value(token).ensure_dims(OP, "token", &[c])?;
        let xv = self.value(x).data();
        let tv = self.value(token).data();
        let mut y = Vec::with_capacity(n * c * (t + 1));
        for i in 0..n {
            for ch in 0..c {
                y.push(tv[ch]);
                y.extend_from_slice(&xv[(i * c + ch) * t..(i * c + ch + 1) * t]);
            }
        }
        let value = Tensor::new(&[n, c, t + 1, 1], y)?;
        let needs = self.needs_any(&[Some(x), Some(token)]);
        self.push(OP, value, Op::PrependToken { x, token }, needs)
    }

    /// Token `index` of a `[N, C, T, 1]` sequence as `[N, C]`.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        const OP: &str = "select_token";
        self.value(x).ensure_rank(OP, 4)?;
        let (n, c, t, w) = self.value(x).nchw();
        if w != 1 {
            return Err(Error::dim(OP, "width of token layout", 1, w));
        }
        if index >= t {
            return Err(Error::dim(OP, "token index", format!("< {t}"), index));
        }
        let xv = self.value(x).data();
        let y: Vec<T> = (0..n * c).map(|nc| xv[nc * t + index]).collect();
        let value = Tensor::new(&[n, c], y)?;
        let needs = self.needs(x);
        self.push(OP, value, Op::SelectToken { x, index }, needs)
    }

    /// Mean softmax cross-entropy of `logits[N, K]` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        const OP: &str = "cross_entropy";
        self.value(logits).ensure_rank(OP, 2)?;
        let (n, k) = (self.dims(logits)[0], self.dims(logits)[1]);
        if labels.len() != n {
            return Err(Error::dim(OP, "labels", n, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::dim(OP, "label", format!("< {k}"), bad));
        }
        let mut probs = self.value(logits).data().to_vec();
        pointwise::softmax_rows(k, &mut probs);
        let lv = self.value(logits).data();
        let mut loss = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            let row = &lv[i * k..(i + 1) * k];
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            loss += lse - row[l];
        }
        loss /= T::of_usize(n);
        let needs = self.needs(logits);
        self.push(
            OP,
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        )
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim("backward", "loss element count", 1, self.value(loss).numel()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Grads { per_node: grads })
    }

    /// Runs [`Tape::backward`] and accumulates parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.backward(loss)?;
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(path), Some(g)) = (&node.op, grads.per_node[idx].as_ref()) {
                let t = store.get_mut(path)?;
                if t.requires_grad() {
                    t.accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let mut acc = |v: Var, d: &[T]| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(d).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(d.to_vec()),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv { x, w, b, geom } => {
                let (dx, dw, db) = conv::backward(geom, self.value(*x).data(), self.value(*w).data(), g, self.needs(*x));
                if let Some(dx) = dx {
                    acc(*x, &dx);
                }
                acc(*w, &dw);
                if let Some(b) = b {
                    acc(*b, &db);
                }
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            } => {
                let (rows, din, dout) = (*rows, *din, *dout);
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); rows * din];
                    gemm(rows, din, dout, g, self.value(*w).data(), &mut dx, false);
                    acc(*x, &dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); dout * din];
                    // dw = gᵀ · x
                    crate::kernels::gemm::gemm_tn(dout, din, rows, g, self.value(*x).data(), &mut dw, false);
                    acc(*w, &dw);
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); dout];
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    acc(*b, &db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                mean,
                invstd,
                batch_stats,
            } => {
                let (dx, dg, db) = norm::batch_norm_backward(
                    *layout,
                    self.value(*x).data(),
                    mean,
                    invstd,
                    self.value(*gamma).data(),
                    g,
                    *batch_stats,
                );
                acc(*x, &dx);
                acc(*gamma, &dg);
                acc(*beta, &db);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                layout,
                mean,
                rstd,
            } => {
                let (dx, dg, db) =
                    norm::layer_norm_backward(*layout, self.value(*x).data(), mean, rstd, self.value(*gamma).data(), g);
                acc(*x, &dx);
                acc(*gamma, &dg);
                acc(*beta, &db);
            }
            Op::Softmax { x, outer, len, inner } => {
                let dx = pointwise::softmax_backward(*outer, *len, *inner, node.value.data(), g);
                acc(*x, &dx);
            }
            Op::Act { x, kind } => {
                let xv = self.value(*x).data();
                let dx: Vec<T> = match kind {
                    Activation::Relu => xv
                        .iter()
                        .zip(g)
                        .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                        .collect(),
                    Activation::Gelu => xv.iter().zip(g).map(|(&v, &d)| d * pointwise::gelu_grad(v)).collect(),
                };
                acc(*x, &dx);
            }
            Op::GlobalAvgPool { x, spatial } => {
                let inv = T::one() / T::of_usize(*spatial);
                let dx: Vec<T> = g
                    .iter()
                    .flat_map(|&d| std::iter::repeat_n(d * inv, *spatial))
                    .collect();
                acc(*x, &dx);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&i, &d) in argmax.iter().zip(g) {
                    dx[i] += d;
                }
                acc(*x, &dx);
            }
            Op::Add { a, b } => {
                acc(*a, g);
                acc(*b, g);
            }
            Op::AddBroadcast { x, e } => {
                acc(*x, g);
                let len = self.value(*e).numel();
                let mut de = vec![T::zero(); len];
                for chunk in g.chunks(len) {
                    de.iter_mut().zip(chunk).for_each(|(a, &v)| *a += v);
                }
                acc(*e, &de);
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let da: Vec<T> = g.iter().zip(bv).map(|(&d, &v)| d * v).collect();
                let db: Vec<T> = g.iter().zip(av).map(|(&d, &v)| d * v).collect();
                acc(*a, &da);
                acc(*b, &db);
            }
            Op::Scale { x, s } => {
                let dx: Vec<T> = g.iter().map(|&d| d * *s).collect();
                acc(*x, &dx);
            }
            Op::Sum { x } => {
                let dx = vec![g[0]; self.value(*x).numel()];
                acc(*x, &dx);
            }
            Op::Reshape { x } => acc(*x, g),
            Op::Attention {
                qkv,
                bias,
                geom,
                mode,
                probs,
            } => {
                let (dqkv, dbias) = attn_k::backward(geom, *mode, self.value(*qkv).data(), probs, g, bias.is_some());
                acc(*qkv, &dqkv);
                if let (Some(b), Some(db)) = (bias, dbias) {
                    acc(*b, &db);
                }
            }
            Op::Gather { table, index } => {
                let mut dt = vec![T::zero(); self.value(*table).numel()];
                for (&i, &d) in index.iter().zip(g) {
                    dt[i] += d;
                }
                acc(*table, &dt);
            }
            Op::PrependToken { x, token } => {
                let (n, c, t, _) = self.value(*x).nchw();
                let mut dx = Vec::with_capacity(n * c * t);
                let mut dt = vec![T::zero(); c];
                for i in 0..n {
                    for (ch, dtc) in dt.iter_mut().enumerate() {
                        let base = (i * c + ch) * (t + 1);
                        *dtc += g[base];
                        dx.extend_from_slice(&g[base + 1..base + 1 + t]);
                    }
                }
                acc(*x, &dx);
                acc(*token, &dt);
            }
            Op::SelectToken { x, index } => {
                let (n, c, t, _) = self.value(*x).nchw();
                let mut dx = vec![T::zero(); n * c * t];
                for nc in 0..n * c {
                    dx[nc * t + index] = g[nc];
                }
                acc(*x, &dx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.dims(*logits)[1];
                let scale = g[0] / T::of_usize(labels.len());
                let mut dl = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    dl[i * k + l] -= T::one();
                }
                dl.iter_mut().for_each(|v| *v *= scale);
                acc(*logits, &dl);
            }
        }
        Ok(())
    }
}
