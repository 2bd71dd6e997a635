use rayon::prelude::*;

use crate::error::{CsmError, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

use super::{LayerSpec, NetworkGrads, NetworkParams, NetworkSpec};

/// Everything `backward` needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    stamp: u64,
    /// `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    acts: Vec<Tensor<T>>,
    extras: Vec<Extra<T>>,
}

#[derive(Clone, Debug)]
enum Extra<T> {
    None,
    /// Flat input index of each pooled maximum.
    Argmax(Vec<u32>),
    /// Per-element denominator base `k + alpha * Σ a²`.
    Scale(Vec<T>),
}

impl<T: Real> ForwardCache<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().expect("cache holds the input").data()
    }

    /// Activation of layer `layer` (its output).
    pub fn activation(&self, layer: usize) -> &Tensor<T> {
        &self.acts[layer + 1]
    }

    /// Discrete state of the pass: which ReLUs are active and where each
    /// pool window took its maximum. Two passes with equal patterns lie on
    /// the same linear piece of the network.
    pub fn activation_pattern(&self, spec: &NetworkSpec) -> Vec<u32> {
        let mut pattern = Vec::new();
        for (i, layer) in spec.layers.iter().enumerate() {
            match (layer, &self.extras[i]) {
                (LayerSpec::Conv { relu: true, .. } | LayerSpec::FullyConnected { relu: true, .. }, _) => {
                    pattern.extend(self.acts[i + 1].data().iter().map(|&v| u32::from(v > T::zero())));
                }
                (_, Extra::Argmax(idx)) => pattern.extend_from_slice(idx),
                _ => {}
            }
        }
        pattern
    }
}

/// Output index range `[lo, hi)` for which `o*stride + offset - pad` lands in `[0, n_in)`.
#[inline]
fn valid_range(n_in: usize, n_out: usize, offset: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > offset { (pad - offset).div_ceil(stride) } else { 0 };
    let top = n_in + pad;
    if top <= offset {
        return (0, 0);
    }
    let hi = ((top - offset - 1) / stride + 1).min(n_out);
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
    relu: bool,
    out_shape: &[usize],
) -> Tensor<T> {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let xd = x.data();
    let wdat = w.data();
    let mut out = Tensor::zeros(out_shape);
    let od = out.data_mut();
    for oc in 0..o {
        let plane = &mut od[oc * oh * ow..(oc + 1) * oh * ow];
        plane.iter_mut().for_each(|v| *v = b.data()[oc]);
        for ic in 0..c {
            for ky in 0..k {
                let (ylo, yhi) = valid_range(h, oh, ky, stride, pad);
                for kx in 0..k {
                    let (xlo, xhi) = valid_range(wd, ow, kx, stride, pad);
                    let wv = wdat[((oc * c + ic) * k + ky) * k + kx];
                    for oy in ylo..yhi {
                        let iy = oy * stride + ky - pad;
                        let row_in = &xd[(ic * h + iy) * wd..(ic * h + iy + 1) * wd];
                        let row_out = &mut plane[oy * ow..(oy + 1) * ow];
                        for ox in xlo..xhi {
                            row_out[ox] += wv * row_in[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
    if relu {
        od.iter_mut().for_each(|v| *v = v.max(T::zero()));
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &[T],
    stride: usize,
    pad: usize,
    out_shape: &[usize],
    gw: &mut [T],
    gb: &mut [T],
    gin: Option<&mut [T]>,
) {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let xd = x.data();
    let wdat = w.data();
    for oc in 0..o {
        let plane = &gout[oc * oh * ow..(oc + 1) * oh * ow];
        gb[oc] += plane.iter().copied().sum();
        for ic in 0..c {
            for ky in 0..k {
                let (ylo, yhi) = valid_range(h, oh, ky, stride, pad);
                for kx in 0..k {
                    let (xlo, xhi) = valid_range(wd, ow, kx, stride, pad);
                    let mut acc = T::zero();
                    for oy in ylo..yhi {
                        let iy = oy * stride + ky - pad;
                        let row_in = &xd[(ic * h + iy) * wd..(ic * h + iy + 1) * wd];
                        let row_g = &plane[oy * ow..(oy + 1) * ow];
                        for ox in xlo..xhi {
                            acc += row_g[ox] * row_in[ox * stride + kx - pad];
                        }
                    }
                    gw[((oc * c + ic) * k + ky) * k + kx] += acc;
                }
            }
        }
    }
    if let Some(gin) = gin {
        for oc in 0..o {
            let plane = &gout[oc * oh * ow..(oc + 1) * oh * ow];
            for ic in 0..c {
                for ky in 0..k {
                    let (ylo, yhi) = valid_range(h, oh, ky, stride, pad);
                    for kx in 0..k {
                        let (xlo, xhi) = valid_range(wd, ow, kx, stride, pad);
                        let wv = wdat[((oc * c + ic) * k + ky) * k + kx];
                        for oy in ylo..yhi {
                            let iy = oy * stride + ky - pad;
                            let row_gin = &mut gin[(ic * h + iy) * wd..(ic * h + iy + 1) * wd];
                            let row_g = &plane[oy * ow..(oy + 1) * ow];
                            for ox in xlo..xhi {
                                row_gin[ox * stride + kx - pad] += wv * row_g[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Window maxima; ties keep the first position in row-major window order.
fn pool_forward<T: Real>(x: &Tensor<T>, window: usize, stride: usize, out_shape: &[usize]) -> (Tensor<T>, Vec<u32>) {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let xd = x.data();
    let mut out = Tensor::zeros(out_shape);
    let mut argmax = vec![0u32; out.len()];
    let od = out.data_mut();
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = (ch * h + oy * stride) * wd + ox * stride;
                let mut best = xd[best_idx];
                for wy in 0..window {
                    for wx in 0..window {
                        let idx = (ch * h + oy * stride + wy) * wd + ox * stride + wx;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                od[o] = best;
                argmax[o] = best_idx as u32;
            }
        }
    }
    (out, argmax)
}

fn lcn_forward<T: Real>(x: &Tensor<T>, n: usize, k: f64, alpha: f64, beta: f64) -> (Tensor<T>, Vec<T>) {
    let (c, plane) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
    let half = n / 2;
    let (k, alpha, nbeta) = (T::of(k), T::of(alpha), T::of(-beta));
    let xd = x.data();
    let mut out = Tensor::zeros(x.shape());
    let mut scale = vec![T::zero(); x.len()];
    let od = out.data_mut();
    for p in 0..plane {
        for ch in 0..c {
            let lo = ch.saturating_sub(half);
            let hi = (ch + half).min(c - 1);
            let mut sq = T::zero();
            for j in lo..=hi {
                let a = xd[j * plane + p];
                sq += a * a;
            }
            let s = k + alpha * sq;
            scale[ch * plane + p] = s;
            od[ch * plane + p] = xd[ch * plane + p] * s.powf(nbeta);
        }
    }
    (out, scale)
}

#[allow(clippy::too_many_arguments)]
fn lcn_backward<T: Real>(x: &Tensor<T>, scale: &[T], gout: &[T], n: usize, alpha: f64, beta: f64, gin: &mut [T]) {
    let (c, plane) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
    let half = n / 2;
    let xd = x.data();
    let (b, two_ab) = (T::of(beta), T::of(2.0 * alpha * beta));
    let mut t = vec![T::zero(); c];
    for p in 0..plane {
        for ch in 0..c {
            let i = ch * plane + p;
            t[ch] = gout[i] * xd[i] * scale[i].powf(-b - T::one());
        }
        for j in 0..c {
            let lo = j.saturating_sub(half);
            let hi = (j + half).min(c - 1);
            let acc: T = t[lo..=hi].iter().copied().sum();
            let i = j * plane + p;
            gin[i] += gout[i] * scale[i].powf(-b) - two_ab * xd[i] * acc;
        }
    }
}

fn fc_forward<T: Real>(x: &[T], w: &Tensor<T>, b: &Tensor<T>, relu: bool) -> Tensor<T> {
    let (o, n) = (w.shape()[0], w.shape()[1]);
    let wd = w.data();
    let mut out = Tensor::zeros(&[o]);
    for (r, y) in out.data_mut().iter_mut().enumerate() {
        let mut acc = b.data()[r];
        for (&wv, &xv) in wd[r * n..(r + 1) * n].iter().zip(x) {
            acc += wv * xv;
        }
        *y = if relu { acc.max(T::zero()) } else { acc };
    }
    out
}

/// Runs `image` through the network, returning `F(I)` and the cache for `backward`.
pub fn forward<T: Real>(
    params: &NetworkParams<T>,
    spec: &NetworkSpec,
    image: &Tensor<T>,
) -> Result<(Vec<T>, ForwardCache<T>)> {
    let shapes = spec.layer_shapes()?;
    if image.shape() != spec.input_shape.as_slice() {
        return Err(CsmError::Shape(format!(
            "image shape {:?} does not match network input {:?}",
            image.shape(),
            spec.input_shape
        )));
    }
    if params.blocks().len() != spec.layers.iter().filter(|l| l.has_params()).count() {
        return Err(CsmError::Contract("parameters do not belong to this network spec".into()));
    }
    let mut acts = Vec::with_capacity(spec.layers.len() + 1);
    let mut extras = Vec::with_capacity(spec.layers.len());
    acts.push(image.clone());
    let mut blocks = params.blocks().iter();
    for (i, layer) in spec.layers.iter().enumerate() {
        let x = &acts[i];
        let (out, extra) = match *layer {
            LayerSpec::Conv { stride, padding, relu, .. } => {
                let blk = blocks.next().expect("block count checked");
                (conv_forward(x, &blk.weight, &blk.bias, stride, padding, relu, &shapes[i]), Extra::None)
            }
            LayerSpec::MaxPool { window, stride } => {
                let (out, idx) = pool_forward(x, window, stride, &shapes[i]);
                (out, Extra::Argmax(idx))
            }
            LayerSpec::Lcn { n, k, alpha, beta } => {
                let (out, scale) = lcn_forward(x, n, k, alpha, beta);
                (out, Extra::Scale(scale))
            }
            LayerSpec::FullyConnected { relu, .. } => {
                let blk = blocks.next().expect("block count checked");
                (fc_forward(x.data(), &blk.weight, &blk.bias, relu), Extra::None)
            }
        };
        if !out.is_finite() {
            return Err(CsmError::NonFinite { stage: "forward", layer: i });
        }
        acts.push(out);
        extras.push(extra);
    }
    let embedding = acts.last().expect("at least one layer").data().to_vec();
    Ok((embedding, ForwardCache { stamp: params.stamp(), acts, extras }))
}

/// Parameter gradients of `upstream · F(I)`.
pub fn backward<T: Real>(
    params: &NetworkParams<T>,
    spec: &NetworkSpec,
    cache: &ForwardCache<T>,
    upstream: &[T],
) -> Result<NetworkGrads<T>> {
    let mut grads = params.zeros_like();
    backward_into(params, spec, cache, upstream, &mut grads, false)?;
    Ok(grads)
}

/// Like [`backward`], also returning the gradient with respect to the input image.
pub fn backward_with_input<T: Real>(
    params: &NetworkParams<T>,
    spec: &NetworkSpec,
    cache: &ForwardCache<T>,
    upstream: &[T],
) -> Result<(NetworkGrads<T>, Tensor<T>)> {
    let mut grads = params.zeros_like();
    let gin = backward_into(params, spec, cache, upstream, &mut grads, true)?;
    Ok((grads, gin.expect("input gradient requested")))
}

/// Accumulates parameter gradients into `grads`.
pub(crate) fn backward_into<T: Real>(
    params: &NetworkParams<T>,
    spec: &NetworkSpec,
    cache: &ForwardCache<T>,
    upstream: &[T],
    grads: &mut NetworkGrads<T>,
    want_input_grad: bool,
) -> Result<Option<Tensor<T>>> {
    if cache.stamp != params.stamp() || cache.extras.len() != spec.layers.len() {
        return Err(CsmError::Contract("forward cache does not belong to these parameters".into()));
    }
    if upstream.len() != cache.output().len() {
        return Err(CsmError::Contract(format!(
            "upstream gradient has length {}, embedding has {}",
            upstream.len(),
            cache.output().len()
        )));
    }
    let shapes = spec.layer_shapes()?;
    let mut g = upstream.to_vec();
    let mut block_idx = params.blocks().len();
    let gblocks = grads.blocks_mut();
    for (i, layer) in spec.layers.iter().enumerate().rev() {
        let x = &cache.acts[i];
        let y = &cache.acts[i + 1];
        let need_gin = i > 0 || want_input_grad;
        let mut gin = if need_gin { vec![T::zero(); x.len()] } else { Vec::new() };
        match *layer {
            LayerSpec::Conv { stride, padding, relu, .. } => {
                block_idx -= 1;
                if relu {
                    mask_relu(&mut g, y.data());
                }
                let blk = &params.blocks()[block_idx];
                let gblk = &mut gblocks[block_idx];
                conv_backward(
                    x,
                    &blk.weight,
                    &g,
                    stride,
                    padding,
                    &shapes[i],
                    gblk.weight.data_mut(),
                    gblk.bias.data_mut(),
                    need_gin.then_some(gin.as_mut_slice()),
                );
            }
            LayerSpec::MaxPool { .. } => {
                let Extra::Argmax(idx) = &cache.extras[i] else {
                    return Err(CsmError::Contract("pool cache missing".into()));
                };
                for (&gv, &src) in g.iter().zip(idx) {
                    gin[src as usize] += gv;
                }
            }
            LayerSpec::Lcn { n, alpha, beta, .. } => {
                let Extra::Scale(scale) = &cache.extras[i] else {
                    return Err(CsmError::Contract("lcn cache missing".into()));
                };
                lcn_backward(x, scale, &g, n, alpha, beta, &mut gin);
            }
            LayerSpec::FullyConnected { relu, .. } => {
                block_idx -= 1;
                if relu {
                    mask_relu(&mut g, y.data());
                }
                let blk = &params.blocks()[block_idx];
                let gblk = &mut gblocks[block_idx];
                let n = x.len();
                let (xd, wd) = (x.data(), blk.weight.data());
                let gw = gblk.weight.data_mut();
                for (r, &gv) in g.iter().enumerate() {
                    gblk.bias.data_mut()[r] += gv;
                    if gv == T::zero() {
                        continue;
                    }
                    for (gwv, &xv) in gw[r * n..(r + 1) * n].iter_mut().zip(xd) {
                        *gwv += gv * xv;
                    }
                    if need_gin {
                        for (gi, &wv) in gin.iter_mut().zip(&wd[r * n..(r + 1) * n]) {
                            *gi += wv * gv;
                        }
                    }
                }
            }
        }
        if need_gin && gin.iter().any(|v| !v.is_finite()) {
            return Err(CsmError::NonFinite { stage: "backward", layer: i });
        }
        g = gin;
    }
    Ok(want_input_grad.then(|| Tensor::from_vec(&spec.input_shape, g).expect("input gradient shape")))
}

/// Sums parameter gradients over `(cache, upstream)` jobs. Jobs run in
/// parallel; partial results are added in job order so the total is
/// bit-reproducible.
pub fn backward_sum<T: Real>(
    params: &NetworkParams<T>,
    spec: &NetworkSpec,
    jobs: &[(&ForwardCache<T>, &[T])],
) -> Result<NetworkGrads<T>> {
    let mut total = params.zeros_like();
    for chunk in jobs.chunks(4 * rayon::current_num_threads().max(1)) {
        let partial: Vec<Result<NetworkGrads<T>>> =
            chunk.par_iter().map(|(cache, up)| backward(params, spec, cache, up)).collect();
        for g in partial {
            total.add_assign(&g?);
        }
    }
    Ok(total)
}

#[inline]
fn mask_relu<T: Real>(g: &mut [T], y: &[T]) {
    for (gv, &yv) in g.iter_mut().zip(y) {
        if yv <= T::zero() {
            *gv = T::zero();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_encoder::{init_params, ParamBlock};

    fn single_conv_net() -> (NetworkSpec, NetworkParams<f64>) {
        let spec = NetworkSpec {
            input_shape: [1, 3, 3],
            layers: vec![
                LayerSpec::Conv { out_channels: 1, kernel: 2, stride: 1, padding: 0, relu: false },
                LayerSpec::fc(1, false),
            ],
        };
        let params = NetworkParams::from_blocks(vec![
            ParamBlock { layer: 0, weight: Tensor::filled(&[1, 1, 2, 2], 1.0), bias: Tensor::zeros(&[1]) },
            ParamBlock { layer: 1, weight: Tensor::filled(&[1, 4], 1.0), bias: Tensor::zeros(&[1]) },
        ]);
        (spec, params)
    }

    #[test]
    fn conv_of_ones_by_hand() {
        let (spec, params) = single_conv_net();
        let (_, cache) = forward(&params, &spec, &Tensor::filled(&[1, 3, 3], 1.0)).unwrap();
        assert_eq!(cache.activation(0).shape(), &[1, 2, 2]);
        assert_eq!(cache.activation(0).data(), &[4.0; 4]);
    }

    #[test]
    fn padded_strided_conv_matches_naive() {
        let x: Vec<f64> = (0..2 * 5 * 5).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let x = Tensor::from_vec(&[2, 5, 5], x).unwrap();
        let w: Vec<f64> = (0..3 * 2 * 3 * 3).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
        let w = Tensor::from_vec(&[3, 2, 3, 3], w).unwrap();
        let b = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let (s, p) = (2, 1);
        let oh = super::super::window_output(5, 3, s, p).unwrap();
        let out = conv_forward(&x, &w, &b, s, p, false, &[3, oh, oh]);
        for o in 0..3 {
            for oy in 0..oh {
                for ox in 0..oh {
                    let mut acc = b.data()[o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    acc += w.data()[((o * 2 + c) * 3 + ky) * 3 + kx]
                                        * x.data()[(c * 5 + iy as usize) * 5 + ix as usize];
                                }
                            }
                        }
                    }
                    assert_eq!(out.data()[(o * oh + oy) * oh + ox], acc);
                }
            }
        }
    }

    #[test]
    fn max_pool_takes_window_max() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let (out, idx) = pool_forward(&x, 2, 2, &[1, 1, 1]);
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(idx, vec![3]);
    }

    #[test]
    fn pool_tie_routes_to_first_index() {
        let spec = NetworkSpec {
            input_shape: [1, 2, 2],
            layers: vec![LayerSpec::pool(2, 2), LayerSpec::fc(1, false)],
        };
        let params = NetworkParams::from_blocks(vec![ParamBlock {
            layer: 1,
            weight: Tensor::filled(&[1, 1], 1.0),
            bias: Tensor::zeros(&[1]),
        }]);
        let x = Tensor::from_vec(&[1, 2, 2], vec![0.0f64, 5.0, 5.0, 1.0]).unwrap();
        let (_, cache) = forward(&params, &spec, &x).unwrap();
        let (_, gin) = backward_with_input(&params, &spec, &cache, &[2.0]).unwrap();
        assert_eq!(gin.data(), &[0.0, 2.0, 0.0, 0.0]);
        assert_eq!(gin.data().iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let spec = NetworkSpec::standard([3, 16, 16], 8, 4);
        let params: NetworkParams<f64> = init_params(&spec, 2).unwrap();
        let x = Tensor::filled(&[3, 16, 16], 0.3);
        let (_, cache) = forward(&params, &spec, &x).unwrap();
        let g = backward(&params, &spec, &cache, &[0.0; 4]).unwrap();
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let spec = NetworkSpec::standard([3, 16, 16], 8, 4);
        let mut params: NetworkParams<f64> = init_params(&spec, 2).unwrap();
        let (_, cache) = forward(&params, &spec, &Tensor::filled(&[3, 16, 16], 0.3)).unwrap();
        params.scale(0.5);
        assert!(matches!(backward(&params, &spec, &cache, &[1.0; 4]), Err(CsmError::Contract(_))));
        let (_, cache) = forward(&params, &spec, &Tensor::filled(&[3, 16, 16], 0.3)).unwrap();
        assert!(matches!(backward(&params, &spec, &cache, &[1.0; 3]), Err(CsmError::Contract(_))));
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let spec = NetworkSpec::standard([3, 16, 16], 8, 4);
        let params: NetworkParams<f32> = init_params(&spec, 2).unwrap();
        assert!(forward(&params, &spec, &Tensor::filled(&[3, 8, 8], 0.3)).is_err());
    }

    #[test]
    fn non_finite_input_reports_layer() {
        let (spec, params) = single_conv_net();
        let mut x = Tensor::filled(&[1, 3, 3], 1.0);
        x.data_mut()[0] = f64::NAN;
        assert!(matches!(forward(&params, &spec, &x), Err(CsmError::NonFinite { layer: 0, .. })));
    }

    #[test]
    fn forward_is_bit_stable() {
        let spec = NetworkSpec::standard([3, 16, 16], 8, 4);
        let params: NetworkParams<f32> = init_params(&spec, 5).unwrap();
        let x = Tensor::from_vec(&[3, 16, 16], (0..768).map(|i| (i % 17) as f32 / 17.0).collect()).unwrap();
        let (a, ca) = forward(&params, &spec, &x).unwrap();
        let (b, cb) = forward(&params, &spec, &x).unwrap();
        assert_eq!(a, b);
        let ga = backward(&params, &spec, &ca, &[1.0, -1.0, 0.5, 2.0]).unwrap();
        let gb = backward(&params, &spec, &cb, &[1.0, -1.0, 0.5, 2.0]).unwrap();
        assert_eq!(ga, gb);
    }
}
