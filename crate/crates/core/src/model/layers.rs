use super::{Conv2d, Dense, LayerKind, LayerSpec, Pool};
use crate::error::{Error, Result};

/// Per-layer state kept from the forward pass for backprop.
pub(super) enum Cache {
    None,
    /// Flat input index chosen by each max-pool output.
    Argmax(Vec<usize>),
}

pub(super) fn output_shape(layer: &LayerSpec, input: &[usize]) -> Result<Vec<usize>> {
    let name = &layer.name;
    let spatial = |what: &str| -> Result<(usize, usize, usize)> {
        match input {
            [h, w, c] => Ok((*h, *w, *c)),
            _ => Err(Error::validation(name, format!("{what} needs a (height, width, channels) input, got {input:?}"))),
        }
    };
    match &layer.kind {
        LayerKind::Convolution(conv) => {
            let (h, w, c) = spatial("convolution")?;
            check_conv(name, conv, c)?;
            let (kh, kw) = conv.kernel_size;
            let (ph, pw) = (h + 2 * conv.padding, w + 2 * conv.padding);
            if kh > ph || kw > pw {
                return Err(Error::validation(name, "kernel larger than padded input"));
            }
            Ok(vec![(ph - kh) / conv.stride + 1, (pw - kw) / conv.stride + 1, conv.out_channels])
        }
        LayerKind::Relu => Ok(input.to_vec()),
        LayerKind::MaxPool(pool) => {
            let (h, w, c) = spatial("maxpool")?;
            if pool.window == 0 || pool.stride == 0 {
                return Err(Error::validation(name, "pooling window and stride must be >= 1"));
            }
            if pool.window > h || pool.window > w {
                return Err(Error::validation(name, "pooling window larger than input"));
            }
            Ok(vec![(h - pool.window) / pool.stride + 1, (w - pool.window) / pool.stride + 1, c])
        }
        LayerKind::GlobalAveragePool => {
            let (_, _, c) = spatial("global-average-pool")?;
            Ok(vec![c])
        }
        LayerKind::Flatten => Ok(vec![input.iter().product()]),
        LayerKind::Dense(dense) => {
            check_dense(name, dense)?;
            match input {
                [n] if *n == dense.in_features => Ok(vec![dense.out_features]),
                _ => Err(Error::validation(
                    name,
                    format!("dense layer expects a flat input of {} features, got {input:?}", dense.in_features),
                )),
            }
        }
    }
}

fn check_conv(name: &str, conv: &Conv2d, channels: usize) -> Result<()> {
    let (kh, kw) = conv.kernel_size;
    if kh == 0 || kw == 0 || conv.stride == 0 || conv.out_channels == 0 {
        return Err(Error::validation(name, "kernel size, stride and out_channels must be >= 1"));
    }
    if conv.in_channels != channels {
        return Err(Error::validation(
            name,
            format!("declares {} input channels but receives {channels}", conv.in_channels),
        ));
    }
    let expected = [conv.out_channels, kh, kw, conv.in_channels];
    if conv.weight.shape() != expected {
        return Err(Error::validation(
            name,
            format!("weight shape {:?} does not match declared {:?}", conv.weight.shape(), expected),
        ));
    }
    if conv.bias.shape() != [conv.out_channels] {
        return Err(Error::validation(name, format!("bias shape {:?} should be [{}]", conv.bias.shape(), conv.out_channels)));
    }
    Ok(())
}

fn check_dense(name: &str, dense: &Dense) -> Result<()> {
    let expected = [dense.out_features, dense.in_features];
    if dense.weight.shape() != expected {
        return Err(Error::validation(
            name,
            format!(
                "weight shape {:?} does not match declared fan-in {} / fan-out {}",
                dense.weight.shape(),
                dense.in_features,
                dense.out_features
            ),
        ));
    }
    if dense.bias.shape() != [dense.out_features] {
        return Err(Error::validation(name, format!("bias shape {:?} should be [{}]", dense.bias.shape(), dense.out_features)));
    }
    Ok(())
}

pub(super) fn forward(
    layer: &LayerSpec,
    params: Option<&(Vec<f64>, Vec<f64>)>,
    in_shape: &[usize],
    x: &[f64],
) -> (Vec<f64>, Cache) {
    match &layer.kind {
        LayerKind::Convolution(conv) => {
            let (w, b) = params.expect("convolution parameters");
            (conv_forward(conv, w, b, in_shape, x), Cache::None)
        }
        LayerKind::Relu => (x.iter().map(|&v| v.max(0.0)).collect(), Cache::None),
        LayerKind::MaxPool(pool) => {
            let (out, argmax) = maxpool_forward(*pool, in_shape, x);
            (out, Cache::Argmax(argmax))
        }
        LayerKind::GlobalAveragePool => {
            let c = in_shape[2];
            let hw = (in_shape[0] * in_shape[1]) as f64;
            let mut out = vec![0.0; c];
            for (i, &v) in x.iter().enumerate() {
                out[i % c] += v;
            }
            out.iter_mut().for_each(|v| *v /= hw);
            (out, Cache::None)
        }
        LayerKind::Flatten => (x.to_vec(), Cache::None),
        LayerKind::Dense(dense) => {
            let (w, b) = params.expect("dense parameters");
            let n_in = dense.in_features;
            let out = (0..dense.out_features)
                .map(|o| b[o] + dot(&w[o * n_in..(o + 1) * n_in], x))
                .collect();
            (out, Cache::None)
        }
    }
}

pub(super) fn backward(
    layer: &LayerSpec,
    params: Option<&(Vec<f64>, Vec<f64>)>,
    in_shape: &[usize],
    x: &[f64],
    cache: &Cache,
    grad_out: &[f64],
) -> Vec<f64> {
    match &layer.kind {
        LayerKind::Convolution(conv) => {
            let (w, _) = params.expect("convolution parameters");
            conv_backward(conv, w, in_shape, grad_out)
        }
        LayerKind::Relu => x
            .iter()
            .zip(grad_out)
            .map(|(&xi, &g)| if xi > 0.0 { g } else { 0.0 })
            .collect(),
        LayerKind::MaxPool(_) => {
            let Cache::Argmax(argmax) = cache else { unreachable!("maxpool without argmax cache") };
            let mut grad = vec![0.0; x.len()];
            for (&src, &g) in argmax.iter().zip(grad_out) {
                grad[src] += g;
            }
            grad
        }
        LayerKind::GlobalAveragePool => {
            let c = in_shape[2];
            let hw = (in_shape[0] * in_shape[1]) as f64;
            (0..x.len()).map(|i| grad_out[i % c] / hw).collect()
        }
        LayerKind::Flatten => grad_out.to_vec(),
        LayerKind::Dense(dense) => {
            let (w, _) = params.expect("dense parameters");
            let n_in = dense.in_features;
            let mut grad = vec![0.0; n_in];
            for (o, &g) in grad_out.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                for (gi, &wi) in grad.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *gi += g * wi;
                }
            }
            grad
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn conv_geometry(conv: &Conv2d, in_shape: &[usize]) -> (usize, usize, usize, usize, usize) {
    let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
    let (kh, kw) = conv.kernel_size;
    let oh = (h + 2 * conv.padding - kh) / conv.stride + 1;
    let ow = (w + 2 * conv.padding - kw) / conv.stride + 1;
    (h, w, c, oh, ow)
}

fn conv_forward(conv: &Conv2d, weight: &[f64], bias: &[f64], in_shape: &[usize], x: &[f64]) -> Vec<f64> {
    let (h, w, c, oh, ow) = conv_geometry(conv, in_shape);
    let (kh, kw) = conv.kernel_size;
    let oc = conv.out_channels;
    // Repack to [ky][kx][c][o] so the innermost loop runs over output channels.
    let mut packed = vec![0.0; kh * kw * c * oc];
    for o in 0..oc {
        for k in 0..kh * kw * c {
            packed[k * oc + o] = weight[o * kh * kw * c + k];
        }
    }
    let mut out = vec![0.0; oh * ow * oc];
    for oy in 0..oh {
        for ox in 0..ow {
            let cell = &mut out[(oy * ow + ox) * oc..(oy * ow + ox + 1) * oc];
            cell.copy_from_slice(bias);
            for ky in 0..kh {
                let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let px = &x[(iy as usize * w + ix as usize) * c..][..c];
                    let wk = &packed[(ky * kw + kx) * c * oc..][..c * oc];
                    for (&v, wc) in px.iter().zip(wk.chunks_exact(oc)) {
                        for (acc, &wi) in cell.iter_mut().zip(wc) {
                            *acc += v * wi;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(conv: &Conv2d, weight: &[f64], in_shape: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let (h, w, c, oh, ow) = conv_geometry(conv, in_shape);
    let (kh, kw) = conv.kernel_size;
    let oc = conv.out_channels;
    let mut grad = vec![0.0; h * w * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let g_cell = &grad_out[(oy * ow + ox) * oc..][..oc];
            for ky in 0..kh {
                let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let gx = &mut grad[(iy as usize * w + ix as usize) * c..][..c];
                    for (o, &g) in g_cell.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        let wk = &weight[((o * kh + ky) * kw + kx) * c..][..c];
                        for (gi, &wi) in gx.iter_mut().zip(wk) {
                            *gi += g * wi;
                        }
                    }
                }
            }
        }
    }
    grad
}

fn maxpool_forward(pool: Pool, in_shape: &[usize], x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
    let oh = (h - pool.window) / pool.stride + 1;
    let ow = (w - pool.window) / pool.stride + 1;
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut argmax = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best_idx = (oy * pool.stride * w + ox * pool.stride) * c + ch;
                let mut best = x[best_idx];
                for dy in 0..pool.window {
                    for dx in 0..pool.window {
                        let idx = ((oy * pool.stride + dy) * w + ox * pool.stride + dx) * c + ch;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}
