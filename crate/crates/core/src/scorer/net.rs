//! Forward and backward passes of the reference convolutional classifier:
//! `[conv3x3 -> ReLU -> maxpool2]*` then global average pooling, a linear
//! head and softmax. All parameters live in one flat `f64` vector.

use std::ops::Range;

use super::ScorerConfig;

#[derive(Clone, Debug)]
pub(crate) struct ConvLayout {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub input_size: usize,
    pub convs: Vec<ConvLayout>,
    pub head_in: usize,
    pub classes: usize,
    pub head_weight: Range<usize>,
    pub head_bias: Range<usize>,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ScorerConfig) -> Self {
        let mut offset = 0;
        let mut take = |n: usize| {
            let r = offset..offset + n;
            offset += n;
            r
        };
        let mut in_c = 3;
        let k = cfg.kernel_size;
        let mut convs = Vec::with_capacity(cfg.conv_channels.len());
        for &out_c in &cfg.conv_channels {
            let weight = take(out_c * in_c * k * k);
            let bias = take(out_c);
            convs.push(ConvLayout {
                in_c,
                out_c,
                k,
                weight,
                bias,
            });
            in_c = out_c;
        }
        let head_weight = take(cfg.num_classes * in_c);
        let head_bias = take(cfg.num_classes);
        Layout {
            input_size: cfg.input_size as usize,
            convs,
            head_in: in_c,
            classes: cfg.num_classes,
            head_weight,
            head_bias,
            total: offset,
        }
    }

    /// Fan-in of the parameter at flat position `i`, for initialization.
    pub fn fan_in(&self, i: usize) -> Option<usize> {
        for c in &self.convs {
            if c.weight.contains(&i) {
                return Some(c.in_c * c.k * c.k);
            }
        }
        self.head_weight.contains(&i).then_some(self.head_in)
    }
}

struct BlockCache {
    input: Vec<f64>,
    pre: Vec<f64>,
    argmax: Vec<u32>,
    side: usize,
}

pub(crate) struct Forward {
    blocks: Vec<BlockCache>,
    pooled: Vec<f64>,
    side: usize,
    gap: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

fn valid_range(offset: isize, len: usize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).min(len as isize).max(0) as usize;
    (lo, hi.max(lo))
}

fn conv_forward(input: &[f64], side: usize, c: &ConvLayout, params: &[f64]) -> Vec<f64> {
    let plane = side * side;
    let w = &params[c.weight.clone()];
    let b = &params[c.bias.clone()];
    let pad = (c.k / 2) as isize;
    let mut out = vec![0.0; c.out_c * plane];
    for oc in 0..c.out_c {
        let o = &mut out[oc * plane..(oc + 1) * plane];
        o.fill(b[oc]);
        for ic in 0..c.in_c {
            let inp = &input[ic * plane..(ic + 1) * plane];
            for ky in 0..c.k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(dy, side);
                for kx in 0..c.k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(dx, side);
                    let wv = w[((oc * c.in_c + ic) * c.k + ky) * c.k + kx];
                    for y in y0..y1 {
                        let src = ((y as isize + dy) as usize) * side;
                        let sx0 = (x0 as isize + dx) as usize;
                        let dst = &mut o[y * side + x0..y * side + x1];
                        let s = &inp[src + sx0..src + sx0 + (x1 - x0)];
                        for (d, v) in dst.iter_mut().zip(s) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients and, when `grad_input` is given, the
/// gradient with respect to the block input.
fn conv_backward(
    input: &[f64],
    dpre: &[f64],
    side: usize,
    c: &ConvLayout,
    params: &[f64],
    grad: &mut [f64],
    mut grad_input: Option<&mut [f64]>,
) {
    let plane = side * side;
    let pad = (c.k / 2) as isize;
    for oc in 0..c.out_c {
        let d = &dpre[oc * plane..(oc + 1) * plane];
        grad[c.bias.start + oc] += d.iter().sum::<f64>();
        for ic in 0..c.in_c {
            let inp = &input[ic * plane..(ic + 1) * plane];
            for ky in 0..c.k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(dy, side);
                for kx in 0..c.k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(dx, side);
                    let wi = ((oc * c.in_c + ic) * c.k + ky) * c.k + kx;
                    let wv = params[c.weight.start + wi];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let src = ((y as isize + dy) as usize) * side;
                        let sx0 = (x0 as isize + dx) as usize;
                        let dr = &d[y * side + x0..y * side + x1];
                        let s = &inp[src + sx0..src + sx0 + (x1 - x0)];
                        acc += dr.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(gi) = grad_input.as_deref_mut() {
                            let gi = &mut gi[ic * plane + src + sx0..ic * plane + src + sx0 + (x1 - x0)];
                            for (g, dv) in gi.iter_mut().zip(dr) {
                                *g += wv * dv;
                            }
                        }
                    }
                    grad[c.weight.start + wi] += acc;
                }
            }
        }
    }
}

fn relu_maxpool(pre: &[f64], channels: usize, side: usize) -> (Vec<f64>, Vec<u32>) {
    let half = side / 2;
    let mut out = vec![0.0; channels * half * half];
    let mut arg = vec![0u32; channels * half * half];
    for c in 0..channels {
        let base = c * side * side;
        for y in 0..half {
            for x in 0..half {
                let mut best_i = base + 2 * y * side + 2 * x;
                let mut best = pre[best_i];
                for (oy, ox) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + oy) * side + 2 * x + ox;
                    if pre[i] > best {
                        best = pre[i];
                        best_i = i;
                    }
                }
                let o = c * half * half + y * half + x;
                // max(relu(v)) == relu(max(v))
                out[o] = best.max(0.0);
                arg[o] = best_i as u32;
            }
        }
    }
    (out, arg)
}

pub(crate) fn forward(layout: &Layout, params: &[f64], input: Vec<f64>) -> Forward {
    let mut x = input;
    let mut side = layout.input_size;
    let mut blocks = Vec::with_capacity(layout.convs.len());
    for c in &layout.convs {
        let pre = conv_forward(&x, side, c, params);
        let (pooled, argmax) = relu_maxpool(&pre, c.out_c, side);
        blocks.push(BlockCache {
            input: x,
            pre,
            argmax,
            side,
        });
        x = pooled;
        side /= 2;
    }
    let plane = (side * side) as f64;
    let gap: Vec<f64> = x
        .chunks(side * side)
        .map(|ch| ch.iter().sum::<f64>() / plane)
        .collect();
    let hw = &params[layout.head_weight.clone()];
    let hb = &params[layout.head_bias.clone()];
    let logits: Vec<f64> = (0..layout.classes)
        .map(|k| {
            hb[k]
                + hw[k * layout.head_in..(k + 1) * layout.head_in]
                    .iter()
                    .zip(&gap)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
        })
        .collect();
    let probs = softmax(&logits);
    Forward {
        blocks,
        pooled: x,
        side,
        gap,
        logits,
        probs,
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Cross-entropy `-log p[target]` computed from logits.
pub(crate) fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Adds `scale * d loss / d params` for one sample into `grad`.
pub(crate) fn backward(
    layout: &Layout,
    params: &[f64],
    fwd: &Forward,
    target: usize,
    scale: f64,
    grad: &mut [f64],
) {
    let dlogits: Vec<f64> = fwd
        .probs
        .iter()
        .enumerate()
        .map(|(k, p)| scale * (p - if k == target { 1.0 } else { 0.0 }))
        .collect();
    let c_in = layout.head_in;
    let hw = &params[layout.head_weight.clone()];
    let mut dgap = vec![0.0; c_in];
    for (k, dl) in dlogits.iter().enumerate() {
        grad[layout.head_bias.start + k] += dl;
        for c in 0..c_in {
            grad[layout.head_weight.start + k * c_in + c] += dl * fwd.gap[c];
            dgap[c] += dl * hw[k * c_in + c];
        }
    }
    let plane = fwd.side * fwd.side;
    let mut dpooled: Vec<f64> = (0..fwd.pooled.len())
        .map(|i| dgap[i / plane] / plane as f64)
        .collect();
    for (bi, (c, cache)) in layout.convs.iter().zip(&fwd.blocks).enumerate().rev() {
        let mut dpre = vec![0.0; cache.pre.len()];
        for (o, &src) in cache.argmax.iter().enumerate() {
            let src = src as usize;
            if cache.pre[src] > 0.0 {
                dpre[src] += dpooled[o];
            }
        }
        if bi == 0 {
            conv_backward(&cache.input, &dpre, cache.side, c, params, grad, None);
        } else {
            let mut dinput = vec![0.0; cache.input.len()];
            conv_backward(&cache.input, &dpre, cache.side, c, params, grad, Some(&mut dinput));
            dpooled = dinput;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_counts_parameters() {
        let cfg = ScorerConfig::desk();
        let l = Layout::new(&cfg);
        // conv 3->8: 216 + 8, conv 8->16: 1152 + 16, head 16->3: 48 + 3
        assert_eq!(l.total, 216 + 8 + 1152 + 16 + 48 + 3);
        assert_eq!(l.fan_in(0), Some(27));
        assert_eq!(l.fan_in(l.head_weight.start), Some(16));
        assert_eq!(l.fan_in(l.head_bias.start), None);
    }

    #[test]
    fn cross_entropy_matches_softmax() {
        let logits = [0.3, -1.2, 2.0];
        let p = softmax(&logits);
        for t in 0..3 {
            assert!((cross_entropy(&logits, t) + p[t].ln()).abs() < 1e-12);
        }
    }
}
