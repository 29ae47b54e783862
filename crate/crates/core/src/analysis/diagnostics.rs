//! Token redundancy statistics, attention rows, slimming score maps and
//! linear CKA. Computations run in f64 regardless of the model's scalar.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SitError};
use crate::scalar::Scalar;
use crate::slim::SlimMatrix;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMeasure {
    #[default]
    Pearson,
    Cosine,
}

/// Pairwise similarity of the rows of a `T × C` token matrix, row-major
/// `T × T`. Rows with zero variance (Pearson) or zero norm (cosine) are
/// given similarity 0 with everything, themselves included.
pub fn similarity_matrix<T: Scalar>(
    tokens: &Tensor<T>,
    measure: SimilarityMeasure,
) -> Result<Vec<f64>> {
    let (t, c) = tokens.dims2()?;
    let rows: Vec<Vec<f64>> = (0..t)
        .map(|i| {
            let r: Vec<f64> = tokens.data()[i * c..(i + 1) * c]
                .iter()
                .map(|v| v.as_f64())
                .collect();
            let mean = match measure {
                SimilarityMeasure::Pearson => r.iter().sum::<f64>() / c as f64,
                SimilarityMeasure::Cosine => 0.0,
            };
            let centered: Vec<f64> = r.iter().map(|v| v - mean).collect();
            let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                centered.iter().map(|v| v / norm).collect()
            } else {
                vec![0.0; c]
            }
        })
        .collect();
    let mut out = vec![0.0; t * t];
    for i in 0..t {
        for j in i..t {
            let s: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            out[i * t + j] = s;
            out[j * t + i] = s;
        }
    }
    Ok(out)
}

/// Per-layer redundancy: for each `k`, the fraction of tokens similar
/// (≥ threshold) to at least `k` other tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    pub layer: usize,
    pub threshold: f64,
    pub k: Vec<usize>,
    pub proportions: Vec<f64>,
}

pub fn token_similarity_stats<T: Scalar>(
    layers: &[Tensor<T>],
    threshold: f64,
    ks: &[usize],
    measure: SimilarityMeasure,
) -> Result<Vec<SimilarityStats>> {
    layers
        .iter()
        .enumerate()
        .map(|(layer, tokens)| {
            let t = tokens.dims2()?.0;
            let sim = similarity_matrix(tokens, measure)?;
            let counts: Vec<usize> = (0..t)
                .map(|i| {
                    (0..t)
                        .filter(|&j| j != i && sim[i * t + j] >= threshold)
                        .count()
                })
                .collect();
            let proportions = ks
                .iter()
                .map(|&k| counts.iter().filter(|&&n| n >= k).count() as f64 / t.max(1) as f64)
                .collect();
            Ok(SimilarityStats {
                layer,
                threshold,
                k: ks.to_vec(),
                proportions,
            })
        })
        .collect()
}

/// Head-averaged attention rows of the selected query tokens from a
/// `heads × T × T` probability tensor.
pub fn attention_focus<T: Scalar>(attn: &Tensor<T>, token_ids: &[usize]) -> Result<Vec<Vec<f64>>> {
    let &[heads, t, t2] = attn.shape() else {
        return Err(SitError::shape("attention_focus", attn.shape(), &[0, 0, 0]));
    };
    if t != t2 || heads == 0 {
        return Err(SitError::shape(
            "attention_focus",
            attn.shape(),
            &[heads, t, t],
        ));
    }
    token_ids
        .iter()
        .map(|&q| {
            if q >= t {
                return Err(SitError::Index { index: q, len: t });
            }
            let mut row = vec![0.0; t];
            for h in 0..heads {
                let base = (h * t + q) * t;
                for (r, v) in row.iter_mut().zip(&attn.data()[base..base + t]) {
                    *r += v.as_f64() / heads as f64;
                }
            }
            Ok(row)
        })
        .collect()
}

/// Contribution of each original patch token at one stage, on the patch
/// grid, normalized to a maximum of 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMap {
    pub stage: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ScoreMap {
    /// Plain PGM (P2), max value 255, row-major.
    pub fn to_pgm(&self) -> String {
        let mut s = format!("P2\n{} {}\n255\n", self.width, self.height);
        for row in self.values.chunks(self.width) {
            let line: Vec<String> = row
                .iter()
                .map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
                .collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }
}

/// Stage 0 is all ones; stage `s` holds the column sums of
/// `Â_s ··· Â_1` divided by their maximum.
pub fn score_map<T: Scalar>(slim: &[SlimMatrix<T>], grid: (usize, usize)) -> Result<Vec<ScoreMap>> {
    let n0 = grid.0 * grid.1;
    let mut maps = vec![ScoreMap {
        stage: 0,
        height: grid.0,
        width: grid.1,
        values: vec![1.0; n0],
    }];
    // Running product, rows × n0.
    let mut prod = Tensor::<f64>::eye(n0);
    for (s, a) in slim.iter().enumerate() {
        let a = a.tensor().cast::<f64>();
        if a.dims2()?.1 != prod.dims2()?.0 {
            return Err(SitError::shape("score_map", a.shape(), prod.shape()));
        }
        prod = a.matmul(&prod)?;
        let mut values = prod.column_sums()?;
        let max = values.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            values.iter_mut().for_each(|v| *v /= max);
        }
        maps.push(ScoreMap {
            stage: s + 1,
            height: grid.0,
            width: grid.1,
            values,
        });
    }
    Ok(maps)
}

/// Linear CKA between two `n × d` feature sets (rows are examples).
pub fn cka<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let (n, _) = a.dims2()?;
    let (n2, _) = b.dims2()?;
    if n != n2 || n < 2 {
        return Err(SitError::shape("cka", a.shape(), b.shape()));
    }
    let ka = centered_gram(a)?;
    let kb = centered_gram(b)?;
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let (aa, bb) = (dot(&ka, &ka), dot(&kb, &kb));
    if aa == 0.0 {
        return Err(SitError::ZeroNorm("cka: first feature set"));
    }
    if bb == 0.0 {
        return Err(SitError::ZeroNorm("cka: second feature set"));
    }
    Ok(dot(&ka, &kb) / (aa * bb).sqrt())
}

/// `H X Xᵀ H` with `H = I − 11ᵀ/n`, computed as the Gram of centered columns.
fn centered_gram<T: Scalar>(x: &Tensor<T>) -> Result<Vec<f64>> {
    let (n, d) = x.dims2()?;
    let mut c: Vec<f64> = x.data().iter().map(|v| v.as_f64()).collect();
    for j in 0..d {
        let mean = (0..n).map(|i| c[i * d + j]).sum::<f64>() / n as f64;
        (0..n).for_each(|i| c[i * d + j] -= mean);
    }
    let c = Tensor::new(&[n, d], c)?;
    Ok(c.matmul(&c.transpose()?)?.into_data())
}

/// CKA between every pair of layers, `rows[i][j] = cka(a[i], b[j])`.
pub fn cka_matrix<T: Scalar>(a: &[Tensor<T>], b: &[Tensor<T>]) -> Result<Vec<Vec<f64>>> {
    a.iter()
        .map(|x| b.iter().map(|y| cka(x, y)).collect())
        .collect()
}
