//! Straightforward reference implementations used to check the fast paths.


use rand::Rng;
use rand_distr::StandardNormal;

use crate::numcore::{ParamStore, Tensor};
use crate::sparseconv::BnBuffers;
use crate::sparsemap::SparseMap;

/// `n_sites` distinct random sites inside a `window × window` square, with
/// standard normal features.
pub fn random_map<R: Rng + ?Sized>(rng: &mut R, window: usize, n_sites: usize, feat_dim: usize) -> SparseMap {
    let n_sites = n_sites.clamp(1, window * window);
    let mut cells: Vec<usize> = (0..window * window).collect();
    let (chosen, _) = rand::seq::SliceRandom::partial_shuffle(cells.as_mut_slice(), rng, n_sites);
    let sites = chosen.iter().map(|&c| ((c % window) as i64, (c / window) as i64)).collect();
    let features = (0..n_sites * feat_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    SparseMap::new(sites, features, feat_dim).expect("distinct non-negative sites")
}

/// Dense zero-padded cross-correlation over the map's bounding box, read back
/// at the active sites in map order. `w: [k, k, c_in, c_out]`, indexed
/// `[dy][dx]` with `dx` along `i` and `dy` along `j`.
pub fn dense_conv_at_sites(map: &SparseMap, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let shape = w.shape();
    let (k, ci, co) = (shape[0], shape[2], shape[3]);
    let r = (k / 2) as i64;
    let (i0, j0) = map.sites().iter().fold((i64::MAX, i64::MAX), |(a, c), &(i, j)| (a.min(i), c.min(j)));
    let (i1, j1) = map.sites().iter().fold((i64::MIN, i64::MIN), |(a, c), &(i, j)| (a.max(i), c.max(j)));
    let (wi, wj) = ((i1 - i0 + 1) as usize, (j1 - j0 + 1) as usize);
    let mut grid = vec![0.0; wi * wj * ci];
    for (s, &(i, j)) in map.sites().iter().enumerate() {
        let cell = ((j - j0) as usize * wi + (i - i0) as usize) * ci;
        grid[cell..cell + ci].copy_from_slice(map.feature(s));
    }
    let at = |i: i64, j: i64, c: usize| -> f64 {
        if i < i0 || i > i1 || j < j0 || j > j1 {
            0.0
        } else {
            grid[((j - j0) as usize * wi + (i - i0) as usize) * ci + c]
        }
    };
    let mut out = Vec::with_capacity(map.len() * co);
    for &(i, j) in map.sites() {
        for c_out in 0..co {
            let mut acc = b.data()[c_out];
            for dy in 0..k {
                for dx in 0..k {
                    for c_in in 0..ci {
                        let wv = w.data()[((dy * k + dx) * ci + c_in) * co + c_out];
                        acc += wv * at(i + dx as i64 - r, j + dy as i64 - r, c_in);
                    }
                }
            }
            out.push(acc);
        }
    }
    out
}

/// Brute-force neighbour scan: every `(input, output, offset)` triple.
pub fn neighbour_triples(map: &SparseMap, kernel_size: usize) -> Vec<(usize, usize, usize)> {
    let r = (kernel_size / 2) as i64;
    let mut out = Vec::new();
    for (a, &(ia, ja)) in map.sites().iter().enumerate() {
        for (b, &(ib, jb)) in map.sites().iter().enumerate() {
            let (di, dj) = (ib - ia, jb - ja);
            if di.abs() <= r && dj.abs() <= r {
                let o = ((dj + r) * kernel_size as i64 + (di + r)) as usize;
                out.push((b, a, o));
            }
        }
    }
    out.sort_unstable();
    out
}

fn matvec(w: &[f64], ci: usize, co: usize, x: &[f64], bias: &[f64]) -> Vec<f64> {
    (0..co)
        .map(|c| bias[c] + (0..ci).map(|i| w[i * co + c] * x[i]).sum::<f64>())
        .collect()
}

fn bn_eval(x: &[f64], store: &ParamStore, buffers: &BnBuffers, key: &str) -> Vec<f64> {
    let state = &buffers[key];
    let gamma = store.value(&format!("{key}.gamma")).data();
    let beta = store.value(&format!("{key}.beta")).data();
    x.iter()
        .enumerate()
        .map(|(c, v)| (v - state.running_mean[c]) / (state.running_var[c] + state.eps).sqrt() * gamma[c] + beta[c])
        .collect()
}

/// A residual block in eval mode applied to one isolated site: only the
/// centre taps of each kernel see data, so it reduces to vector math.
pub fn residual_block_single_site(
    store: &ParamStore,
    buffers: &BnBuffers,
    prefix: &str,
    f: &[f64],
    out_channels: usize,
    has_projection: bool,
) -> Vec<f64> {
    let ci = f.len();
    let co = out_channels;
    let centre = |name: &str, cin: usize| -> Vec<f64> {
        let w = store.value(&format!("{prefix}.{name}"));
        let k = w.shape()[0];
        let c = (k / 2) * k + k / 2;
        w.data()[c * cin * co..(c + 1) * cin * co].to_vec()
    };
    let zero = vec![0.0; co];
    let h1 = matvec(&centre("conv1.w", ci), ci, co, f, &zero);
    let a1: Vec<f64> = bn_eval(&h1, store, buffers, &format!("{prefix}.bn1")).into_iter().map(|v| v.max(0.0)).collect();
    let h2 = matvec(&centre("conv2.w", co), co, co, &a1, &zero);
    let b2 = bn_eval(&h2, store, buffers, &format!("{prefix}.bn2"));
    let skip = if has_projection {
        matvec(
            store.value(&format!("{prefix}.skip.w")).data(),
            ci,
            co,
            f,
            store.value(&format!("{prefix}.skip.b")).data(),
        )
    } else {
        f.to_vec()
    };
    b2.iter().zip(&skip).map(|(a, s)| (a + s).max(0.0)).collect()
}

