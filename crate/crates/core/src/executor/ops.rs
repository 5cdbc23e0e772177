use crate::graph::FeatureShape;

pub(super) struct ParamGrads {
    pub dx: Vec<f64>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

/// `y[b, o] = sum_i w[o, i] * x[b, i] + bias[o]`
pub(super) fn dense_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * fan_out];
    for b in 0..n {
        let xb = &x[b * fan_in..(b + 1) * fan_in];
        for o in 0..fan_out {
            let row = &w[o * fan_in..(o + 1) * fan_in];
            let mut acc = bias.map_or(0.0, |bias| bias[o]);
            for (wi, xi) in row.iter().zip(xb) {
                acc += wi * xi;
            }
            y[b * fan_out + o] = acc;
        }
    }
    y
}

pub(super) fn dense_backward(x: &[f64], w: &[f64], dy: &[f64], n: usize, fan_in: usize, fan_out: usize) -> ParamGrads {
    let mut dx = vec![0.0; n * fan_in];
    let mut dw = vec![0.0; fan_out * fan_in];
    let mut db = vec![0.0; fan_out];
    for b in 0..n {
        let xb = &x[b * fan_in..(b + 1) * fan_in];
        for o in 0..fan_out {
            let g = dy[b * fan_out + o];
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            for i in 0..fan_in {
                dw[o * fan_in + i] += g * xb[i];
                dx[b * fan_in + i] += g * w[o * fan_in + i];
            }
        }
    }
    ParamGrads { dx, dw, db }
}

pub(super) struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    pub fn new(input: FeatureShape, output: FeatureShape, kernel: [usize; 2], stride: usize, pad: usize) -> Self {
        let (h, w) = input.spatial.expect("conv input is spatial");
        let (ho, wo) = output.spatial.expect("conv output is spatial");
        Self {
            cin: input.channels,
            h,
            w,
            cout: output.channels,
            ho,
            wo,
            kh: kernel[0],
            kw: kernel[1],
            stride,
            pad,
        }
    }

    /// Input pixel read by output `(oy, ox)` at kernel offset `(ky, kx)`.
    #[inline]
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

pub(super) fn conv_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, n: usize, g: &ConvGeom) -> Vec<f64> {
    let in_plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    let ksize = g.kh * g.kw;
    let mut y = vec![0.0; n * g.cout * out_plane];
    for b in 0..n {
        for o in 0..g.cout {
            let base = (b * g.cout + o) * out_plane;
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = bias.map_or(0.0, |bias| bias[o]);
                    for c in 0..g.cin {
                        let xoff = (b * g.cin + c) * in_plane;
                        let woff = (o * g.cin + c) * ksize;
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                if let Some((sy, sx)) = g.src(oy, ox, ky, kx) {
                                    acc += w[woff + ky * g.kw + kx] * x[xoff + sy * g.w + sx];
                                }
                            }
                        }
                    }
                    y[base + oy * g.wo + ox] = acc;
                }
            }
        }
    }
    y
}

pub(super) fn conv_backward(x: &[f64], w: &[f64], dy: &[f64], n: usize, g: &ConvGeom) -> ParamGrads {
    let in_plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    let ksize = g.kh * g.kw;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.cout];
    for b in 0..n {
        for o in 0..g.cout {
            let base = (b * g.cout + o) * out_plane;
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let grad = dy[base + oy * g.wo + ox];
                    if grad == 0.0 {
                        continue;
                    }
                    db[o] += grad;
                    for c in 0..g.cin {
                        let xoff = (b * g.cin + c) * in_plane;
                        let woff = (o * g.cin + c) * ksize;
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                if let Some((sy, sx)) = g.src(oy, ox, ky, kx) {
                                    let xi = xoff + sy * g.w + sx;
                                    let wi = woff + ky * g.kw + kx;
                                    dw[wi] += grad * x[xi];
                                    dx[xi] += grad * w[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    ParamGrads { dx, dw, db }
}

fn spatial(shape: FeatureShape) -> (usize, usize) {
    shape.spatial.unwrap_or((1, 1))
}

/// Max ties resolve to the first position in row-major window order.
pub(super) fn pool_forward(
    x: &[f64],
    n: usize,
    input: FeatureShape,
    output: FeatureShape,
    window: usize,
    stride: usize,
    max: bool,
) -> Vec<f64> {
    let (h, w) = spatial(input);
    let (ho, wo) = spatial(output);
    let planes = n * input.channels;
    let mut y = vec![0.0; planes * ho * wo];
    let area = (window * window) as f64;
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = if max { f64::NEG_INFINITY } else { 0.0 };
                for ky in 0..window {
                    for kx in 0..window {
                        let v = src[(oy * stride + ky) * w + ox * stride + kx];
                        if max {
                            if v > acc {
                                acc = v;
                            }
                        } else {
                            acc += v;
                        }
                    }
                }
                y[p * ho * wo + oy * wo + ox] = if max { acc } else { acc / area };
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub(super) fn pool_backward(
    x: &[f64],
    dy: &[f64],
    n: usize,
    input: FeatureShape,
    output: FeatureShape,
    window: usize,
    stride: usize,
    max: bool,
) -> Vec<f64> {
    let (h, w) = spatial(input);
    let (ho, wo) = spatial(output);
    let planes = n * input.channels;
    let mut dx = vec![0.0; x.len()];
    let area = (window * window) as f64;
    for p in 0..planes {
        let off = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let g = dy[p * ho * wo + oy * wo + ox];
                if max {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for ky in 0..window {
                        for kx in 0..window {
                            let idx = off + (oy * stride + ky) * w + ox * stride + kx;
                            if x[idx] > best {
                                best = x[idx];
                                at = idx;
                            }
                        }
                    }
                    dx[at] += g;
                } else {
                    for ky in 0..window {
                        for kx in 0..window {
                            dx[off + (oy * stride + ky) * w + ox * stride + kx] += g / area;
                        }
                    }
                }
            }
        }
    }
    dx
}

pub(super) fn gap_forward(x: &[f64], n: usize, input: FeatureShape) -> Vec<f64> {
    let (h, w) = spatial(input);
    let plane = h * w;
    (0..n * input.channels)
        .map(|p| x[p * plane..(p + 1) * plane].iter().sum::<f64>() / plane as f64)
        .collect()
}

pub(super) fn gap_backward(dy: &[f64], n: usize, input: FeatureShape) -> Vec<f64> {
    let (h, w) = spatial(input);
    let plane = h * w;
    let mut dx = Vec::with_capacity(n * input.channels * plane);
    for &g in &dy[..n * input.channels] {
        dx.extend(std::iter::repeat_n(g / plane as f64, plane));
    }
    dx
}
