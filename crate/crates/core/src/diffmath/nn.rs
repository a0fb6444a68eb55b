//! Composite operations built from graph primitives.
//!
//! Everything here is a composition, so adjoints (to any order) come for
//! free from the primitive rules in `graph`.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::array::NdArray;
use super::graph::{Graph, NodeId};

/// Contract mode `mode` (0-based) of `t` against `k: (t_n, u_n)`:
/// `out[..., j, ...] = sum_i t[..., i, ...] * k[i, j]`.
pub fn mode_product(g: &mut Graph, t: NodeId, k: NodeId, mode: usize) -> Result<NodeId> {
    let tshape = g.shape(t).to_vec();
    let kshape = g.shape(k).to_vec();
    if mode >= tshape.len() {
        return Err(Error::Dimension(format!(
            "mode_product: mode {mode} out of range for rank {}",
            tshape.len()
        )));
    }
    if kshape.len() != 2 || kshape[0] != tshape[mode] {
        return Err(Error::Dimension(format!(
            "mode_product: mode {mode} extent {} does not match factor rows {:?}",
            tshape[mode], kshape
        )));
    }
    let rank = tshape.len();
    let (t_n, u_n) = (kshape[0], kshape[1]);

    // Bring `mode` to the front, flatten the rest, contract, restore.
    let mut perm = vec![mode];
    perm.extend((0..rank).filter(|&d| d != mode));
    let fronted = g.permute(t, &perm)?;
    let rest: usize = tshape.iter().enumerate().filter(|&(d, _)| d != mode).map(|(_, &e)| e).product();
    let flat = g.reshape(fronted, vec![t_n, rest])?;
    let kt = g.transpose2(k)?;
    let prod = g.matmul(kt, flat)?; // (u_n, rest)
    let mut mid_shape = vec![u_n];
    mid_shape.extend(tshape.iter().enumerate().filter(|&(d, _)| d != mode).map(|(_, &e)| e));
    let unflat = g.reshape(prod, mid_shape)?;
    let mut inv = vec![0usize; rank];
    for (i, &ax) in perm.iter().enumerate() {
        inv[ax] = i;
    }
    g.permute(unflat, &inv)
}

/// Squared Euclidean distance between two same-shaped nodes.
pub fn sq_l2(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = g.sub(a, b)?;
    let d2 = g.mul(d, d)?;
    g.sum_all(d2)
}

/// Mean softmax cross-entropy of `logits (B, C)` against integer labels.
/// The row max is subtracted as a constant for numerical stability; the
/// result is mathematically independent of that shift.
pub fn softmax_cross_entropy(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!("softmax_cross_entropy: logits {shape:?}")));
    }
    let (b, c) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(Error::Data(format!("{} labels for batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
    }
    let vals = g.value(logits);
    let mut maxes = NdArray::zeros(&[b, 1]);
    for i in 0..b {
        let row = &vals.data()[i * c..(i + 1) * c];
        maxes.data_mut()[i] = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    let m = g.constant(maxes);
    let mb = g.broadcast_to(m, vec![b, c])?;
    let shifted = g.sub(logits, mb)?;
    let e = g.exp(shifted);
    let z = g.reduce_sum(e, &[1], true)?;
    let lz = g.ln(z)?;
    let lzb = g.broadcast_to(lz, vec![b, c])?;
    let logp = g.sub(shifted, lzb)?;
    let map: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| i * c + l).collect();
    let picked = g.gather(logp, Arc::new(map), vec![b])?;
    let total = g.sum_all(picked)?;
    Ok(g.scale(total, -1.0 / b as f64))
}

/// `x (B, F) @ w (F, C) + bias (C)`.
pub fn linear(g: &mut Graph, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId> {
    let y = g.matmul(x, w)?;
    let (b, c) = (g.shape(y)[0], g.shape(y)[1]);
    let br = g.reshape(bias, vec![1, c])?;
    let bb = g.broadcast_to(br, vec![b, c])?;
    g.add(y, bb)
}

/// Conv 3x3/s1/p1 with a per-channel bias.
pub fn conv2d_bias(g: &mut Graph, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId> {
    let y = g.conv2d(x, w)?;
    let s = g.shape(y).to_vec();
    let br = g.reshape(bias, vec![1, s[1], 1, 1])?;
    let bb = g.broadcast_to(br, s)?;
    g.add(y, bb)
}

/// Instance normalization over the spatial axes of `x (B, C, H, W)`,
/// followed by a per-channel affine transform.
pub fn instance_norm(
    g: &mut Graph,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    eps: f64,
) -> Result<NodeId> {
    let n = normalize_instances(g, x, eps)?;
    let s = g.shape(n).to_vec();
    let c = s[1];
    let gr = g.reshape(gamma, vec![1, c, 1, 1])?;
    let gb = g.broadcast_to(gr, s.clone())?;
    let br = g.reshape(beta, vec![1, c, 1, 1])?;
    let bb = g.broadcast_to(br, s)?;
    let scaled = g.mul(n, gb)?;
    g.add(scaled, bb)
}

/// The standardization part of instance norm (no affine).
pub fn normalize_instances(g: &mut Graph, x: NodeId, eps: f64) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("instance_norm: input {s:?}")));
    }
    let hw = (s[2] * s[3]) as f64;
    let sum = g.reduce_sum(x, &[2, 3], true)?;
    let mu = g.scale(sum, 1.0 / hw);
    let mub = g.broadcast_to(mu, s.clone())?;
    let xc = g.sub(x, mub)?;
    let xc2 = g.mul(xc, xc)?;
    let vsum = g.reduce_sum(xc2, &[2, 3], true)?;
    let var = g.scale(vsum, 1.0 / hw);
    let veps = g.affine(var, 1.0, eps);
    let std = g.sqrt(veps)?;
    let rstd = g.recip(std)?;
    let rb = g.broadcast_to(rstd, s)?;
    g.mul(xc, rb)
}

/// 2x2 average pooling with stride 2 on `x (B, C, H, W)`.
pub fn avg_pool2(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
        return Err(Error::Dimension(format!("avg_pool2: input {s:?} needs even H and W")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let grouped = g.reshape(x, vec![b, c, h / 2, 2, w / 2, 2])?;
    let summed = g.reduce_sum(grouped, &[3, 5], false)?;
    Ok(g.scale(summed, 0.25))
}

/// Select rows of a batch tensor `(N, ...)` by index (with repeats allowed).
pub fn select_rows(g: &mut Graph, x: NodeId, rows: &[usize]) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    let tail: usize = s[1..].iter().product();
    if let Some(&bad) = rows.iter().find(|&&r| r >= s[0]) {
        return Err(Error::Range(format!("select_rows: row {bad} out of {}", s[0])));
    }
    let mut map = Vec::with_capacity(rows.len() * tail);
    for &r in rows {
        map.extend(r * tail..(r + 1) * tail);
    }
    let mut out_shape = vec![rows.len()];
    out_shape.extend(&s[1..]);
    g.gather(x, Arc::new(map), out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_product_identity_factor_is_identity() {
        let mut g = Graph::new();
        let t = g.constant(NdArray::from_fn(&[2, 3], |i| (i[0] * 3 + i[1]) as f64));
        let k = g.constant(NdArray::identity(3));
        let y = mode_product(&mut g, t, k, 1).unwrap();
        assert_eq!(g.value(y), g.value(t));
    }

    #[test]
    fn mode_product_matches_hand_example() {
        let mut g = Graph::new();
        let t = g.constant(NdArray::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let k = g.constant(NdArray::new(vec![2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap());
        let y = mode_product(&mut g, t, k, 0).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 6.0, 3.0, 4.0]);
    }

    #[test]
    fn mode_product_matches_brute_force_triple_loop() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let t_arr = NdArray::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let k_arr = NdArray::uniform(&[4, 5], -1.0, 1.0, &mut rng);
        let mut want = NdArray::zeros(&[3, 5]);
        for a in 0..3 {
            for j in 0..5 {
                let mut acc = 0.0;
                for i in 0..4 {
                    acc += t_arr.at(&[a, i]) * k_arr.at(&[i, j]);
                }
                want.set(&[a, j], acc);
            }
        }
        let mut g = Graph::new();
        let t = g.constant(t_arr);
        let k = g.constant(k_arr);
        let y = mode_product(&mut g, t, k, 1).unwrap();
        assert!(g.value(y).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn mode_product_names_the_mode_on_mismatch() {
        let mut g = Graph::new();
        let t = g.constant(NdArray::zeros(&[2, 3]));
        let k = g.constant(NdArray::zeros(&[4, 4]));
        let err = mode_product(&mut g, t, k, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("mode 1") && msg.contains('3') && msg.contains('4'), "{msg}");
    }

    #[test]
    fn cross_entropy_of_zero_logits_is_ln_c() {
        let mut g = Graph::new();
        let logits = g.constant(NdArray::zeros(&[4, 3]));
        let loss = softmax_cross_entropy(&mut g, logits, &[0, 1, 2, 0]).unwrap();
        assert!((g.value(loss).data()[0] - (3.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut g = Graph::new();
        let logits = g.constant(NdArray::zeros(&[2, 3]));
        assert!(matches!(
            softmax_cross_entropy(&mut g, logits, &[0, 3]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn avg_pool_averages_blocks() {
        let mut g = Graph::new();
        let x = g.constant(NdArray::from_fn(&[1, 1, 2, 4], |i| (i[2] * 4 + i[3]) as f64));
        let y = avg_pool2(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 2]);
        // Blocks: {0,1,4,5} -> 2.5 and {2,3,6,7} -> 4.5.
        assert_eq!(g.value(y).data(), &[2.5, 4.5]);
    }

    #[test]
    fn instance_norm_standardizes_each_sample_channel() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x_arr = NdArray::uniform(&[3, 2, 4, 4], -2.0, 5.0, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(x_arr);
        let y = normalize_instances(&mut g, x, 1e-5).unwrap();
        let v = g.value(y);
        for b in 0..3 {
            for c in 0..2 {
                let mut mean = 0.0;
                let mut var = 0.0;
                for i in 0..4 {
                    for j in 0..4 {
                        mean += v.at(&[b, c, i, j]);
                    }
                }
                mean /= 16.0;
                for i in 0..4 {
                    for j in 0..4 {
                        var += (v.at(&[b, c, i, j]) - mean).powi(2);
                    }
                }
                var /= 16.0;
                assert!(mean.abs() < 1e-5, "mean {mean}");
                assert!((var - 1.0).abs() < 1e-4, "var {var}");
            }
        }
    }
}
