//! k-means audio tokenizer and 100 Hz → 25 fps token alignment.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::TOKENS_PER_FRAME;
use crate::seed;
use crate::tensor::Mat;

const CODEBOOK_MAGIC: &[u8; 4] = b"SVCB";
const CODEBOOK_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// `V × d_a`; every entry is exactly representable as `f32`.
    pub centroids: Mat,
    pub seed: u64,
    /// Mean squared distance of the fitting data to its nearest centroid.
    pub fit_distortion: f64,
    /// Distortion after the assignment step of each Lloyd iteration.
    pub history: Vec<f64>,
}

impl Codebook {
    pub fn size(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by squared Euclidean distance, lowest index on ties.
fn nearest(centroids: &Mat, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for k in 0..centroids.rows() {
        let d = sq_dist(centroids.row(k), x);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn assign(centroids: &Mat, features: &Mat, labels: &mut [usize], dists: &mut [f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..features.rows() {
        let (k, d) = nearest(centroids, features.row(i));
        labels[i] = k;
        dists[i] = d;
        total += d;
    }
    total / features.rows() as f64
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn fit_codebook(features: &Mat, size: usize, iters: usize, fit_seed: u64) -> Result<Codebook> {
    let (n, dim) = features.shape();
    if size == 0 || n < size {
        return Err(Error::InvalidArgument(format!(
            "need at least as many points ({n}) as centroids ({size}), and size >= 1"
        )));
    }
    if iters == 0 {
        return Err(Error::InvalidArgument("iters must be >= 1".into()));
    }
    if dim == 0 {
        return Err(Error::InvalidArgument("features have zero width".into()));
    }
    let mut rng = seed::rng(fit_seed, &[]);

    let mut centroids = Mat::zeros(size, dim);
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).copy_from_slice(features.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(features.row(i), features.row(first))).collect();
    for k in 1..size {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            // Guard against landing on a zero-weight tail through rounding.
            if d2[chosen] == 0.0 {
                chosen = d2.iter().position(|&d| d > 0.0).unwrap();
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(k).copy_from_slice(features.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(features.row(i), features.row(pick)));
        }
    }

    let mut labels = vec![0usize; n];
    let mut dists = vec![0.0; n];
    let mut history = Vec::with_capacity(iters);
    for _ in 0..iters {
        history.push(assign(&centroids, features, &mut labels, &mut dists));

        let mut sums = Mat::zeros(size, dim);
        let mut counts = vec![0usize; size];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, x) in sums.row_mut(labels[i]).iter_mut().zip(features.row(i)) {
                *s += x;
            }
        }
        for k in 0..size {
            if counts[k] > 0 {
                for (c, s) in centroids.row_mut(k).iter_mut().zip(sums.row(k)) {
                    *c = s / counts[k] as f64;
                }
            }
        }
        // Empty clusters take the point currently farthest from its centroid.
        for k in 0..size {
            if counts[k] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .unwrap();
                centroids.row_mut(k).copy_from_slice(features.row(far));
                dists[far] = 0.0;
            }
        }
    }

    for v in centroids.data_mut() {
        *v = *v as f32 as f64;
    }
    let fit_distortion = assign(&centroids, features, &mut labels, &mut dists);
    Ok(Codebook {
        centroids,
        seed: fit_seed,
        fit_distortion,
        history,
    })
}

/// Index of the nearest centroid for every row of `features`.
pub fn quantize(codebook: &Codebook, features: &Mat) -> Result<Vec<u16>> {
    if features.cols() != codebook.dim() {
        return Err(Error::ShapeMismatch(format!(
            "features have width {}, codebook expects {}",
            features.cols(),
            codebook.dim()
        )));
    }
    Ok((0..features.rows())
        .map(|i| nearest(&codebook.centroids, features.row(i)).0 as u16)
        .collect())
}

/// Mean squared distance of `features` to their quantized centroids.
pub fn distortion(codebook: &Codebook, features: &Mat) -> Result<f64> {
    let tokens = quantize(codebook, features)?;
    Ok(tokens
        .iter()
        .enumerate()
        .map(|(i, &k)| sq_dist(features.row(i), codebook.centroids.row(k as usize)))
        .sum::<f64>()
        / features.rows() as f64)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignedTokens {
    /// Row-major `frames × 4`.
    pub grid: Vec<u16>,
    pub padded: usize,
    pub truncated: usize,
}

/// Reshapes a 100 Hz token stream into four tokens per 25 fps frame,
/// padding a short stream with `pad_id` and dropping any tail beyond `4·frames`.
pub fn align_tokens(tokens: &[u16], frames: usize, pad_id: u16) -> Result<AlignedTokens> {
    if tokens.is_empty() || frames == 0 {
        return Err(Error::InvalidArgument("need at least one token and one frame".into()));
    }
    let want = frames * TOKENS_PER_FRAME;
    let mut grid: Vec<u16> = tokens.iter().copied().take(want).collect();
    let padded = want - grid.len();
    grid.resize(want, pad_id);
    Ok(AlignedTokens {
        grid,
        padded,
        truncated: tokens.len().saturating_sub(want),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CodebookHeader {
    version: u32,
    size: usize,
    dim: usize,
    seed: u64,
    distortion: f64,
}

/// `SVCB`, u32 header length, JSON header, then `V × d_a` little-endian `f32`.
pub fn save_codebook(codebook: &Codebook, path: &Path) -> Result<()> {
    let header = serde_json::to_vec(&CodebookHeader {
        version: CODEBOOK_VERSION,
        size: codebook.size(),
        dim: codebook.dim(),
        seed: codebook.seed,
        distortion: codebook.fit_distortion,
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + 4 * codebook.centroids.len());
    out.extend(CODEBOOK_MAGIC);
    out.extend((header.len() as u32).to_le_bytes());
    out.extend(&header);
    for &v in codebook.centroids.data() {
        out.extend((v as f32).to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_codebook(path: &Path) -> Result<Codebook> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[..4] != CODEBOOK_MAGIC {
        return Err(Error::corrupt(path, "missing codebook magic"));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = bytes
        .get(8..8 + hlen)
        .ok_or_else(|| Error::corrupt(path, "truncated header"))?;
    let header: CodebookHeader = serde_json::from_slice(body)?;
    if header.version != CODEBOOK_VERSION {
        return Err(Error::VersionMismatch {
            found: header.version,
            expected: CODEBOOK_VERSION,
        });
    }
    let block = &bytes[8 + hlen..];
    if block.len() != 4 * header.size * header.dim {
        return Err(Error::corrupt(path, "centroid block has the wrong length"));
    }
    let data = block
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Codebook {
        centroids: Mat::from_vec(header.size, header.dim, data),
        seed: header.seed,
        fit_distortion: header.distortion,
        history: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn column(xs: &[f64]) -> Mat {
        Mat::from_vec(xs.len(), 1, xs.to_vec())
    }

    #[test]
    fn single_centroid_is_the_mean() {
        let x = Mat::from_vec(4, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let cb = fit_codebook(&x, 1, 5, 0).unwrap();
        assert_eq!(cb.centroids.data(), &[3.0, 4.0]);
        // Per-dimension variance 5, summed over both dimensions.
        assert!((cb.fit_distortion - 10.0).abs() < 1e-12);
    }

    #[test]
    fn two_clusters_in_one_dimension() {
        let cb = fit_codebook(&column(&[0.0, 0.0, 10.0, 10.0]), 2, 5, 11).unwrap();
        let mut c = cb.centroids.data().to_vec();
        c.sort_by(f64::total_cmp);
        assert_eq!(c, vec![0.0, 10.0]);
        assert_eq!(cb.fit_distortion, 0.0);
    }

    #[test]
    fn nearest_and_tie_rules() {
        let cb = Codebook {
            centroids: column(&[0.0, 1.0, 5.0, 3.0, 3.0]),
            seed: 0,
            fit_distortion: 0.0,
            history: vec![],
        };
        assert_eq!(quantize(&cb, &column(&[3.0])).unwrap(), vec![3]);
        // 2.0 is equidistant from centroids 1 (at 1.0) and 3 (at 3.0).
        assert_eq!(quantize(&cb, &column(&[2.0])).unwrap(), vec![1]);
        assert!(quantize(&cb, &Mat::zeros(1, 2)).is_err());
    }

    #[test]
    fn fewer_points_than_centroids_is_an_error() {
        assert!(fit_codebook(&column(&[1.0, 2.0]), 3, 5, 0).is_err());
    }

    #[test]
    fn align_examples() {
        let toks: Vec<u16> = (0..12).collect();
        let a = align_tokens(&toks, 3, 99).unwrap();
        assert_eq!((a.grid.clone(), a.padded, a.truncated), (toks.clone(), 0, 0));

        let a = align_tokens(&toks[..10], 3, 99).unwrap();
        assert_eq!(&a.grid[8..], &[8, 9, 99, 99]);
        assert_eq!(a.padded, 2);

        let long: Vec<u16> = (0..17).collect();
        let a = align_tokens(&long, 3, 99).unwrap();
        assert_eq!(a.truncated, 5);
        assert_eq!(a.grid, toks);
    }

    #[test]
    fn codebook_file_round_trip() {
        let x = Mat::from_vec(6, 2, vec![0.0, 0.5, 1.0, 1.5, 9.0, 9.5, 10.0, 10.25, -3.0, 2.0, -2.5, 2.5]);
        let cb = fit_codebook(&x, 3, 10, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cb.bin");
        save_codebook(&cb, &p).unwrap();
        let back = load_codebook(&p).unwrap();
        assert_eq!(back.centroids, cb.centroids);
        assert_eq!(back.fit_distortion, cb.fit_distortion);
        assert_eq!(back.seed, 4);
    }

    proptest! {
        #[test]
        fn lloyd_never_increases_distortion(
            raw in proptest::collection::vec(-5.0f64..5.0, 20..120),
            size in 1usize..8,
            seed in 0u64..1000,
        ) {
            let n = raw.len() / 2;
            prop_assume!(n >= size);
            let x = Mat::from_vec(n, 2, raw[..n * 2].to_vec());
            let cb = fit_codebook(&x, size, 12, seed).unwrap();
            for w in cb.history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9);
            }
            prop_assert_eq!(distortion(&cb, &x).unwrap(), cb.fit_distortion);
        }

        #[test]
        fn memorizes_distinct_points(pts in proptest::collection::btree_set(-1000i32..1000, 1..12), seed in 0u64..100) {
            let xs: Vec<f64> = pts.iter().map(|&p| p as f64).collect();
            let x = column(&xs);
            let cb = fit_codebook(&x, xs.len(), 10, seed).unwrap();
            prop_assert_eq!(cb.fit_distortion, 0.0);
            let toks = quantize(&cb, &x).unwrap();
            let distinct: std::collections::BTreeSet<_> = toks.iter().collect();
            prop_assert_eq!(distinct.len(), xs.len());
        }

        #[test]
        fn alignment_shape_and_prefix(len in 1usize..200, frames in 1usize..60) {
            let toks: Vec<u16> = (0..len as u16).collect();
            let a = align_tokens(&toks, frames, u16::MAX).unwrap();
            prop_assert_eq!(a.grid.len(), frames * 4);
            let stripped: Vec<u16> = a.grid.iter().copied().filter(|&z| z != u16::MAX).collect();
            prop_assert_eq!(&stripped[..], &toks[..stripped.len()]);
            prop_assert_eq!(a.padded + stripped.len(), frames * 4);
            prop_assert_eq!(stripped.len() + a.truncated, len);
        }
    }
}
