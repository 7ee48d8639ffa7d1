use super::Rulebook;
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::sparsemap::SparseMap;

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

fn check(x: &Tensor, weights: &Tensor, bias: &Tensor, rb: &Rulebook) -> Result<(usize, usize)> {
    let shape = weights.shape();
    if shape.len() != 4 || shape[0] != shape[1] {
        return Err(Error::config(format!("conv weights must be [k, k, c_in, c_out], got {shape:?}")));
    }
    if shape[0] != rb.kernel_size() || x.rows() != rb.n_sites() {
        return Err(Error::StaleRulebook);
    }
    let (c_in, c_out) = (shape[2], shape[3]);
    if x.cols() != c_in {
        return Err(Error::DimensionMismatch {
            expected: c_in,
            found: x.cols(),
        });
    }
    if bias.len() != c_out {
        return Err(Error::DimensionMismatch {
            expected: c_out,
            found: bias.len(),
        });
    }
    Ok((c_in, c_out))
}

/// Output at each active site `s` is `bias + Σ_o W_o · x[s + o]`, summing
/// only over active neighbours. `x: [n_sites, c_in]`.
pub fn submconv_forward(x: &Tensor, weights: &Tensor, bias: &Tensor, rb: &Rulebook) -> Result<Tensor> {
    let (c_in, c_out) = check(x, weights, bias, rb)?;
    let n = x.rows();
    let mut out = Vec::with_capacity(n * c_out);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    let xd = x.data();
    let wd = weights.data();
    for o in 0..rb.n_offsets() {
        let w_o = &wd[o * c_in * c_out..(o + 1) * c_in * c_out];
        for &(inp, outp) in rb.pairs(o) {
            let xr = &xd[inp * c_in..(inp + 1) * c_in];
            let yr = &mut out[outp * c_out..(outp + 1) * c_out];
            for (ci, &xv) in xr.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (y, &w) in yr.iter_mut().zip(&w_o[ci * c_out..(ci + 1) * c_out]) {
                    *y += xv * w;
                }
            }
        }
    }
    Tensor::matrix(n, c_out, out)
}

/// Map-level convenience: same site set, convolved features.
pub fn submconv_forward_map(map: &SparseMap, weights: &Tensor, bias: &Tensor, rb: &Rulebook) -> Result<SparseMap> {
    let x = Tensor::matrix(map.len(), map.feat_dim(), map.features().to_vec())?;
    let y = submconv_forward(&x, weights, bias, rb)?;
    let c_out = y.cols();
    SparseMap::new(map.sites().to_vec(), y.into_data(), c_out)
}

/// Gradients through the transposed rulebook, given the forward input.
pub fn submconv_backward(x: &Tensor, weights: &Tensor, grad_out: &Tensor, rb: &Rulebook) -> Result<ConvGrads> {
    let c_out = weights.shape().last().copied().unwrap_or(0);
    let bias = Tensor::zeros(&[c_out.max(1)]);
    let (c_in, c_out) = check(x, weights, &bias, rb)?;
    if grad_out.rows() != x.rows() || grad_out.cols() != c_out {
        return Err(Error::DimensionMismatch {
            expected: x.rows() * c_out,
            found: grad_out.len(),
        });
    }
    let n = x.rows();
    let xd = x.data();
    let wd = weights.data();
    let gd = grad_out.data();
    let mut g_in = Tensor::zeros(&[n, c_in]);
    let mut g_w = Tensor::zeros(weights.shape());
    let mut g_b = Tensor::zeros(&[c_out]);
    for r in 0..n {
        for (a, &g) in g_b.data_mut().iter_mut().zip(&gd[r * c_out..(r + 1) * c_out]) {
            *a += g;
        }
    }
    for o in 0..rb.n_offsets() {
        let w_o = &wd[o * c_in * c_out..(o + 1) * c_in * c_out];
        for &(inp, outp) in rb.pairs(o) {
            let gr = &gd[outp * c_out..(outp + 1) * c_out];
            let xr = &xd[inp * c_in..(inp + 1) * c_in];
            let gi = &mut g_in.data_mut()[inp * c_in..(inp + 1) * c_in];
            for ci in 0..c_in {
                gi[ci] += w_o[ci * c_out..(ci + 1) * c_out]
                    .iter()
                    .zip(gr)
                    .map(|(w, g)| w * g)
                    .sum::<f64>();
            }
            let gw_o = &mut g_w.data_mut()[o * c_in * c_out..(o + 1) * c_in * c_out];
            for (ci, &xv) in xr.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (a, &g) in gw_o[ci * c_out..(ci + 1) * c_out].iter_mut().zip(gr) {
                    *a += xv * g;
                }
            }
        }
    }
    Ok(ConvGrads {
        input: g_in,
        weights: g_w,
        bias: g_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::linear::normal_tensor;
    use crate::numcore::{finite_diff_grad, max_relative_error};
    use crate::selftest::oracle;
    use rand::SeedableRng;

    #[test]
    fn single_site_uses_center_tap() {
        let mut rng = crate::seeding::Rng::seed_from_u64(1);
        let m = SparseMap::new(vec![(3, 3)], vec![1.0, -2.0], 2).unwrap();
        let w = normal_tensor(&[3, 3, 2, 3], 1.0, &mut rng);
        let b = Tensor::vector(vec![0.1, 0.2, 0.3]);
        let rb = Rulebook::build(&m, 3).unwrap();
        let y = submconv_forward_map(&m, &w, &b, &rb).unwrap();
        let center = &w.data()[4 * 6..5 * 6];
        for co in 0..3 {
            let expected = b.data()[co] + 1.0 * center[co] - 2.0 * center[3 + co];
            assert!((y.feature(0)[co] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_kernel() {
        let m = SparseMap::new(vec![(0, 0), (1, 0), (1, 1)], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2).unwrap();
        let mut w = Tensor::zeros(&[3, 3, 2, 2]);
        w.data_mut()[4 * 4] = 1.0;
        w.data_mut()[4 * 4 + 3] = 1.0;
        let rb = Rulebook::build(&m, 3).unwrap();
        let y = submconv_forward_map(&m, &w, &Tensor::zeros(&[2]), &rb).unwrap();
        assert_eq!(y, m);
    }

    #[test]
    fn stale_rulebook_detected() {
        let a = SparseMap::new(vec![(0, 0), (1, 0)], vec![1.0, 2.0], 1).unwrap();
        let b = SparseMap::new(vec![(0, 0)], vec![1.0], 1).unwrap();
        let rb = Rulebook::build(&b, 3).unwrap();
        let w = Tensor::zeros(&[3, 3, 1, 1]);
        assert!(matches!(
            submconv_forward_map(&a, &w, &Tensor::zeros(&[1]), &rb),
            Err(Error::StaleRulebook)
        ));
    }

    #[test]
    fn matches_dense_convolution() {
        let mut rng = crate::seeding::Rng::seed_from_u64(2);
        for _ in 0..20 {
            let m = oracle::random_map(&mut rng, 8, 12, 3);
            let w = normal_tensor(&[3, 3, 3, 4], 1.0, &mut rng);
            let b = normal_tensor(&[4], 1.0, &mut rng);
            let rb = Rulebook::build(&m, 3).unwrap();
            let y = submconv_forward_map(&m, &w, &b, &rb).unwrap();
            let dense = oracle::dense_conv_at_sites(&m, &w, &b);
            assert!(max_abs(y.features(), &dense) <= 1e-6);
        }
    }

    fn max_abs(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn zero_grad_out() {
        let m = SparseMap::new(vec![(0, 0), (1, 0)], vec![1.0, 2.0], 1).unwrap();
        let rb = Rulebook::build(&m, 3).unwrap();
        let x = Tensor::matrix(2, 1, m.features().to_vec()).unwrap();
        let w = Tensor::from_vec(&[3, 3, 1, 2], (0..18).map(|v| v as f64).collect()).unwrap();
        let g = submconv_backward(&x, &w, &Tensor::zeros(&[2, 2]), &rb).unwrap();
        assert!(g.input.data().iter().chain(g.weights.data()).chain(g.bias.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn single_site_backward_is_outer_product() {
        let x = Tensor::matrix(1, 2, vec![1.5, -0.5]).unwrap();
        let m = SparseMap::new(vec![(0, 0)], x.data().to_vec(), 2).unwrap();
        let rb = Rulebook::build(&m, 3).unwrap();
        let w = Tensor::from_vec(&[3, 3, 2, 3], (0..54).map(|v| v as f64 * 0.1).collect()).unwrap();
        let g_out = Tensor::matrix(1, 3, vec![1.0, 2.0, -1.0]).unwrap();
        let g = submconv_backward(&x, &w, &g_out, &rb).unwrap();
        assert_eq!(g.bias.data(), g_out.data());
        let center = &g.weights.data()[4 * 6..5 * 6];
        assert_eq!(center, &[1.5, 3.0, -1.5, -0.5, -1.0, 0.5]);
        let others: f64 = g.weights.data().iter().map(|v| v.abs()).sum::<f64>() - center.iter().map(|v| v.abs()).sum::<f64>();
        assert_eq!(others, 0.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = crate::seeding::Rng::seed_from_u64(3);
        let m = oracle::random_map(&mut rng, 4, 7, 3);
        let rb = Rulebook::build(&m, 3).unwrap();
        let x = Tensor::matrix(m.len(), 3, m.features().to_vec()).unwrap();
        let w = normal_tensor(&[3, 3, 3, 2], 1.0, &mut rng);
        let b = normal_tensor(&[2], 1.0, &mut rng);
        let r = normal_tensor(&[m.len(), 2], 1.0, &mut rng);
        let f = |x: &Tensor, w: &Tensor, b: &Tensor| -> f64 {
            let y = submconv_forward(x, w, b, &rb).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let g = submconv_backward(&x, &w, &r, &rb).unwrap();
        let nx = finite_diff_grad(|t| f(t, &w, &b), &x, 1e-5);
        let nw = finite_diff_grad(|t| f(&x, t, &b), &w, 1e-5);
        let nb = finite_diff_grad(|t| f(&x, &w, t), &b, 1e-5);
        assert!(max_relative_error(g.input.data(), nx.data()) < 1e-4);
        assert!(max_relative_error(g.weights.data(), nw.data()) < 1e-4);
        assert!(max_relative_error(g.bias.data(), nb.data()) < 1e-4);
    }
}
