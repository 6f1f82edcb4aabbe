use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{outer_acc, vec_mat_acc, vec_mat_t_acc};
use super::{Matrix, NamedParams};
use crate::{Error, Result};

/// What a layer computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// Concatenate `stride` consecutive frames into one, zero-padding the tail.
    FrameStack {
        stride: usize,
    },
    /// `y = x·W + b`.
    Affine,
    Tanh,
    /// Vanilla tanh recurrence run left-to-right and right-to-left; the two
    /// hidden sequences are concatenated, so each direction has
    /// `output_dim / 2` units.
    RecurrentBidi,
}

/// A layer's kind, dimensions and the prefix of its parameter names.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl LayerSpec {
    pub fn frame_stack(name: &str, input_dim: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::FrameStack { stride },
            input_dim,
            output_dim: input_dim * stride,
        }
    }

    pub fn affine(name: &str, input_dim: usize, output_dim: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Affine,
            input_dim,
            output_dim,
        }
    }

    pub fn tanh(name: &str, dim: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Tanh,
            input_dim: dim,
            output_dim: dim,
        }
    }

    pub fn recurrent_bidi(name: &str, input_dim: usize, output_dim: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::RecurrentBidi,
            input_dim,
            output_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::dim(format!("layer `{}`: {msg}", self.name)));
        if self.input_dim == 0 || self.output_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        match self.kind {
            LayerKind::FrameStack { stride } => {
                if stride == 0 {
                    return bad("stride must be positive".into());
                }
                if self.output_dim != self.input_dim * stride {
                    return bad(format!(
                        "frame_stack output {} != input {} x stride {stride}",
                        self.output_dim, self.input_dim
                    ));
                }
            }
            LayerKind::Tanh if self.input_dim != self.output_dim => {
                return bad("tanh must preserve width".into());
            }
            LayerKind::RecurrentBidi if !self.output_dim.is_multiple_of(2) => {
                return bad("recurrent_bidi output must be even".into());
            }
            _ => {}
        }
        Ok(())
    }

    /// Frame-count reduction factor.
    pub fn stride(&self) -> usize {
        match self.kind {
            LayerKind::FrameStack { stride } => stride,
            _ => 1,
        }
    }

    fn pname(&self, local: &str) -> String {
        format!("{}.{local}", self.name)
    }

    /// `(name, rows, cols, fan_in)` for every trainable array of this layer.
    pub fn param_shapes(&self) -> Vec<(String, usize, usize, usize)> {
        let (i, o) = (self.input_dim, self.output_dim);
        match self.kind {
            LayerKind::FrameStack { .. } | LayerKind::Tanh => vec![],
            LayerKind::Affine => vec![(self.pname("w"), i, o, i), (self.pname("b"), 1, o, i)],
            LayerKind::RecurrentBidi => {
                let h = o / 2;
                ["fwd", "bwd"]
                    .iter()
                    .flat_map(|d| {
                        [
                            (self.pname(&format!("wx_{d}")), i, h, i + h),
                            (self.pname(&format!("wh_{d}")), h, h, i + h),
                            (self.pname(&format!("b_{d}")), 1, h, i + h),
                        ]
                    })
                    .collect()
            }
        }
    }

    /// Uniform `[-r, r]` initialisation with `r = 1/sqrt(fan_in)`.
    pub fn init_params(&self, rng: &mut impl Rng) -> NamedParams {
        self.param_shapes()
            .into_iter()
            .map(|(name, rows, cols, fan_in)| {
                let r = 1.0 / (fan_in as f64).sqrt();
                let data = (0..rows * cols).map(|_| rng.random_range(-r..=r)).collect();
                (name, Matrix::from_raw(rows, cols, data))
            })
            .collect()
    }

    /// This layer's parameters, checked for presence and shape.
    pub fn own_params(&self, params: &NamedParams) -> Result<NamedParams> {
        self.param_shapes()
            .into_iter()
            .map(|(name, r, c, _)| {
                let m = params
                    .expect(&name, r, c)
                    .map_err(|e| e.with_context(format!("layer `{}`", self.name)))?;
                Ok((name, m.clone()))
            })
            .collect()
    }

    /// Number of output rows for `rows` input rows.
    pub fn output_rows(&self, rows: usize) -> usize {
        rows.div_ceil(self.stride())
    }
}

#[derive(Clone, Debug)]
enum CacheData {
    None,
    Input(Matrix),
    Output(Matrix),
    Recurrent {
        input: Matrix,
        h_fwd: Matrix,
        h_bwd: Matrix,
    },
}

/// Activations kept from a forward pass, tied to the layer, shapes and
/// parameter values that produced them.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    layer: String,
    kind: LayerKind,
    input_shape: (usize, usize),
    output_shape: (usize, usize),
    fingerprint: u64,
    data: CacheData,
}

impl ForwardCache {
    pub fn output_shape(&self) -> (usize, usize) {
        self.output_shape
    }

    pub fn input_shape(&self) -> (usize, usize) {
        self.input_shape
    }
}

fn fingerprint(params: &NamedParams) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (name, m) in params {
        for b in name.as_bytes() {
            h = (h ^ u64::from(*b)).wrapping_mul(0x100_0000_01B3);
        }
        for v in m.data() {
            h = (h ^ v.to_bits()).wrapping_mul(0x100_0000_01B3);
        }
    }
    h
}

/// Run one layer forward.
pub fn forward_layer(
    spec: &LayerSpec,
    params: &NamedParams,
    input: &Matrix,
) -> Result<(Matrix, ForwardCache)> {
    spec.validate()?;
    if input.cols() != spec.input_dim {
        return Err(Error::dim(format!(
            "layer `{}` expects {} input columns, got {}x{}",
            spec.name,
            spec.input_dim,
            input.rows(),
            input.cols()
        )));
    }
    let own = spec.own_params(params)?;
    let t = input.rows();
    let (output, data) = match spec.kind {
        LayerKind::FrameStack { stride } => {
            let f = spec.input_dim;
            let mut out = Matrix::zeros(t.div_ceil(stride), f * stride);
            for r in 0..t {
                let (o, k) = (r / stride, r % stride);
                out.row_mut(o)[k * f..(k + 1) * f].copy_from_slice(input.row(r));
            }
            (out, CacheData::None)
        }
        LayerKind::Affine => {
            let w = own.get(&spec.pname("w")).expect("checked");
            let b = own.get(&spec.pname("b")).expect("checked");
            let mut out = Matrix::zeros(t, spec.output_dim);
            for r in 0..t {
                let row = out.row_mut(r);
                row.copy_from_slice(b.data());
                vec_mat_acc(input.row(r), w, row);
            }
            (out, CacheData::Input(input.clone()))
        }
        LayerKind::Tanh => {
            let out = input.map(f64::tanh);
            (out.clone(), CacheData::Output(out))
        }
        LayerKind::RecurrentBidi => {
            let h = spec.output_dim / 2;
            let run = |dir: &str, reverse: bool| {
                let wx = own.get(&spec.pname(&format!("wx_{dir}"))).expect("checked");
                let wh = own.get(&spec.pname(&format!("wh_{dir}"))).expect("checked");
                let b = own.get(&spec.pname(&format!("b_{dir}"))).expect("checked");
                let mut hs = Matrix::zeros(t, h);
                let mut prev = vec![0.0; h];
                for step in 0..t {
                    let r = if reverse { t - 1 - step } else { step };
                    let mut a = b.data().to_vec();
                    vec_mat_acc(input.row(r), wx, &mut a);
                    vec_mat_acc(&prev, wh, &mut a);
                    for v in a.iter_mut() {
                        *v = v.tanh();
                    }
                    hs.row_mut(r).copy_from_slice(&a);
                    prev = a;
                }
                hs
            };
            let h_fwd = run("fwd", false);
            let h_bwd = run("bwd", true);
            let mut out = Matrix::zeros(t, 2 * h);
            for r in 0..t {
                out.row_mut(r)[..h].copy_from_slice(h_fwd.row(r));
                out.row_mut(r)[h..].copy_from_slice(h_bwd.row(r));
            }
            (
                out,
                CacheData::Recurrent {
                    input: input.clone(),
                    h_fwd,
                    h_bwd,
                },
            )
        }
    };
    let cache = ForwardCache {
        layer: spec.name.clone(),
        kind: spec.kind,
        input_shape: input.shape(),
        output_shape: output.shape(),
        fingerprint: fingerprint(&own),
        data,
    };
    Ok((output, cache))
}

/// Backpropagate `grad_out` through one layer.
///
/// Returns the gradient with respect to the layer input and to each of the
/// layer's own parameters.
pub fn backward_layer(
    spec: &LayerSpec,
    params: &NamedParams,
    cache: &ForwardCache,
    grad_out: &Matrix,
) -> Result<(Matrix, NamedParams)> {
    if cache.layer != spec.name || cache.kind != spec.kind {
        return Err(Error::Cache(format!(
            "cache from layer `{}` used for layer `{}`",
            cache.layer, spec.name
        )));
    }
    let own = spec.own_params(params)?;
    if fingerprint(&own) != cache.fingerprint {
        return Err(Error::Cache(format!(
            "parameters of layer `{}` changed since the forward pass",
            spec.name
        )));
    }
    if grad_out.shape() != cache.output_shape {
        return Err(Error::Cache(format!(
            "layer `{}` produced {:?} but grad_out is {:?}",
            spec.name,
            cache.output_shape,
            grad_out.shape()
        )));
    }
    let (t, _) = cache.input_shape;
    let mut grads = own.zeros_like();
    let grad_in = match (&spec.kind, &cache.data) {
        (LayerKind::FrameStack { stride }, CacheData::None) => {
            let f = spec.input_dim;
            let mut gi = Matrix::zeros(t, f);
            for r in 0..t {
                let (o, k) = (r / stride, r % stride);
                gi.row_mut(r)
                    .copy_from_slice(&grad_out.row(o)[k * f..(k + 1) * f]);
            }
            gi
        }
        (LayerKind::Affine, CacheData::Input(input)) => {
            let w = own.get(&spec.pname("w")).expect("checked");
            *grads.get_mut(&spec.pname("w")).expect("present") = input.t_matmul(grad_out)?;
            *grads.get_mut(&spec.pname("b")).expect("present") = grad_out.column_sums();
            grad_out.matmul_t(w)?
        }
        (LayerKind::Tanh, CacheData::Output(y)) => Matrix::from_raw(
            t,
            spec.input_dim,
            grad_out
                .data()
                .iter()
                .zip(y.data())
                .map(|(g, y)| g * (1.0 - y * y))
                .collect(),
        ),
        (
            LayerKind::RecurrentBidi,
            CacheData::Recurrent {
                input,
                h_fwd,
                h_bwd,
            },
        ) => {
            let h = spec.output_dim / 2;
            let mut gi = Matrix::zeros(t, spec.input_dim);
            for (dir, hs, offset, reverse) in [("fwd", h_fwd, 0, false), ("bwd", h_bwd, h, true)] {
                let wx_name = spec.pname(&format!("wx_{dir}"));
                let wh_name = spec.pname(&format!("wh_{dir}"));
                let b_name = spec.pname(&format!("b_{dir}"));
                let wx = own.get(&wx_name).expect("checked");
                let wh = own.get(&wh_name).expect("checked");
                let mut g_wx = Matrix::zeros(spec.input_dim, h);
                let mut g_wh = Matrix::zeros(h, h);
                let mut g_b = Matrix::zeros(1, h);
                // Gradient flowing into h at the current step from the step
                // processed after it.
                let mut carry = vec![0.0; h];
                for step in (0..t).rev() {
                    let r = if reverse { t - 1 - step } else { step };
                    let hr = hs.row(r);
                    let da: Vec<f64> = grad_out.row(r)[offset..offset + h]
                        .iter()
                        .zip(&carry)
                        .zip(hr)
                        .map(|((g, c), hv)| (g + c) * (1.0 - hv * hv))
                        .collect();
                    outer_acc(input.row(r), &da, &mut g_wx);
                    for (gb, d) in g_b.data_mut().iter_mut().zip(&da) {
                        *gb += d;
                    }
                    vec_mat_t_acc(&da, wx, gi.row_mut(r));
                    carry = vec![0.0; h];
                    if step > 0 {
                        let prev_r = if reverse { r + 1 } else { r - 1 };
                        outer_acc(hs.row(prev_r), &da, &mut g_wh);
                        vec_mat_t_acc(&da, wh, &mut carry);
                    }
                }
                *grads.get_mut(&wx_name).expect("present") = g_wx;
                *grads.get_mut(&wh_name).expect("present") = g_wh;
                *grads.get_mut(&b_name).expect("present") = g_b;
            }
            gi
        }
        _ => {
            return Err(Error::Cache(format!(
                "cache payload does not match layer `{}`",
                spec.name
            )))
        }
    };
    Ok((grad_in, grads))
}
