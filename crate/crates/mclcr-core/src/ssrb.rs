//! Shallow style representation block: channel-correlation Gram matrices
//! of early feature maps, reduced to per-scale style vectors.

use crate::backbone::BackboneActivations;
use crate::tensor::{Graph, NodeId, TensorError};

/// Uncentered channel Gram matrix of a `[h,w,c]` feature map: with V the
/// c x (h·w) matrix of vectorized channels, G = V·Vᵀ.
pub fn gram(g: &mut Graph, feature_map: NodeId) -> Result<NodeId, TensorError> {
    let shape = g.shape(feature_map).to_vec();
    if shape.len() != 3 {
        return Err(TensorError::Rank {
            op: "gram",
            expected: "3",
            shape,
        });
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let m = g.reshape(feature_map, &[h * w, c])?;
    let mt = g.transpose(m)?;
    g.matmul(mt, m)
}

/// Style vector: each Gram row's cumulative correlation, reduced by mean.
pub fn ssrb_forward(g: &mut Graph, feature_map: NodeId) -> Result<NodeId, TensorError> {
    let gm = gram(g, feature_map)?;
    g.row_mean(gm)
}

/// Style vectors for the three shallow taps, independently.
pub fn multi_scale_ssrb(
    g: &mut Graph,
    acts: &BackboneActivations,
) -> Result<(NodeId, NodeId, NodeId), TensorError> {
    Ok((
        ssrb_forward(g, acts.b1)?,
        ssrb_forward(g, acts.b2)?,
        ssrb_forward(g, acts.b3)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{rng_for, uniform};
    use crate::tensor::{grad_check, ParamSpec};

    #[test]
    fn constant_channels_give_known_gram() {
        // 2x2 spatial, channel 1 all ones, channel 2 all twos.
        let mut g = Graph::new();
        let data = vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0];
        let fm = g.constant(&[2, 2, 2], data).unwrap();
        let gm = gram(&mut g, fm).unwrap();
        assert_eq!(g.data(gm), &[4.0, 8.0, 8.0, 16.0]);
        let ssf = ssrb_forward(&mut g, fm).unwrap();
        assert_eq!(g.data(ssf), &[6.0, 12.0]);
    }

    #[test]
    fn zero_input_zero_style() {
        let mut g = Graph::new();
        let fm = g.constant(&[3, 3, 4], vec![0.0; 36]).unwrap();
        let gm = gram(&mut g, fm).unwrap();
        assert!(g.data(gm).iter().all(|&v| v == 0.0));
        let ssf = ssrb_forward(&mut g, fm).unwrap();
        assert!(g.data(ssf).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gram_is_symmetric_and_psd() {
        let mut rng = rng_for(60);
        let data = uniform(&mut rng, 5 * 4 * 3, -1.0, 1.0);
        let mut g = Graph::new();
        let fm = g.constant(&[5, 4, 3], data).unwrap();
        let gm = gram(&mut g, fm).unwrap();
        let gd = g.data(gm);
        for i in 0..3 {
            for j in 0..3 {
                assert!((gd[i * 3 + j] - gd[j * 3 + i]).abs() <= 1e-12);
            }
        }
        // Quadratic-form oracle on random probes.
        for probe in 0..8 {
            let x = uniform(&mut rng_for(61 + probe), 3, -1.0, 1.0);
            let mut q = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    q += x[i] * gd[i * 3 + j] * x[j];
                }
            }
            assert!(q >= -1e-8, "probe {probe}: {q}");
        }
    }

    #[test]
    fn spatial_permutation_invariance() {
        use rand::Rng;
        let mut rng = rng_for(62);
        let data = uniform(&mut rng, 4 * 4 * 3, -1.0, 1.0);
        // Permute spatial sites (channel tuples move together).
        let mut perm: Vec<usize> = (0..16).collect();
        for i in (1..16).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let mut permuted = vec![0.0; data.len()];
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..3 {
                permuted[dst * 3 + c] = data[src * 3 + c];
            }
        }
        let mut g = Graph::new();
        let a = g.constant(&[4, 4, 3], data).unwrap();
        let b = g.constant(&[4, 4, 3], permuted).unwrap();
        let sa = ssrb_forward(&mut g, a).unwrap();
        let sb = ssrb_forward(&mut g, b).unwrap();
        let diff = g
            .data(sa)
            .iter()
            .zip(g.data(sb))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-9);
    }

    #[test]
    fn scaling_homogeneity() {
        let mut rng = rng_for(64);
        let data = uniform(&mut rng, 3 * 3 * 2, -1.0, 1.0);
        let scaled: Vec<f64> = data.iter().map(|&v| 2.5 * v).collect();
        let mut g = Graph::new();
        let a = g.constant(&[3, 3, 2], data).unwrap();
        let b = g.constant(&[3, 3, 2], scaled).unwrap();
        let sa = ssrb_forward(&mut g, a).unwrap();
        let sb = ssrb_forward(&mut g, b).unwrap();
        for (x, y) in g.data(sa).iter().zip(g.data(sb)) {
            let rel = (y - x * 6.25).abs() / x.abs().max(1e-12);
            assert!(rel <= 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn gram_gap_gradient_check() {
        let mut rng = rng_for(65);
        let params = [ParamSpec::new(
            "fm",
            &[3, 2, 4],
            uniform(&mut rng, 24, -1.0, 1.0),
        )];
        let report = grad_check(
            |g, ids| {
                let ssf = ssrb_forward(g, ids[0])?;
                let sq = g.mul(ssf, ssf)?;
                Ok(g.sum(sq))
            },
            &params,
            1e-3,
            24,
        )
        .unwrap();
        assert!(report.max_rel_err() <= 1e-4, "{:?}", report.per_param);
    }
}
