//! Scalar reference implementations shared by unit tests.

use std::f64::consts::PI;

use crate::io::SpectralImage;
use crate::model::CarlConfig;
use crate::tensor::{ParamStore, Tensor};

pub type Mat = Vec<Vec<f64>>;

/// Scalar re-implementation of the network, reading weights by name.
pub struct Oracle<'a> {
    pub ps: &'a ParamStore,
    pub cfg: &'a CarlConfig,
}

impl Oracle<'_> {
    pub fn p(&self, name: &str) -> &Tensor {
        self.ps.get(name).unwrap_or_else(|| panic!("missing {name}"))
    }

    pub fn linear(&self, x: &Mat, name: &str) -> Mat {
        let w = self.p(&format!("{name}.weight"));
        let b = self.p(&format!("{name}.bias"));
        let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
        x.iter()
            .map(|row| {
                (0..n_out)
                    .map(|o| {
                        let mut acc = b.data()[o];
                        for i in 0..n_in {
                            acc += row[i] * w.data()[i * n_out + o];
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    }

    pub fn norm(&self, x: &Mat, name: &str) -> Mat {
        let g = self.p(&format!("{name}.weight")).data();
        let b = self.p(&format!("{name}.bias")).data();
        x.iter()
            .map(|row| {
                let d = row.len() as f64;
                let mean = row.iter().sum::<f64>() / d;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
                row.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean) / (var + 1e-6).sqrt() * g[j] + b[j])
                    .collect()
            })
            .collect()
    }

    pub fn attention(&self, xq: &Mat, xkv: &Mat, name: &str, heads: usize) -> Mat {
        let q = self.linear(xq, &format!("{name}.q"));
        let k = self.linear(xkv, &format!("{name}.k"));
        let v = self.linear(xkv, &format!("{name}.v"));
        let d = q[0].len();
        let dh = d / heads;
        let mut out = vec![vec![0.0; d]; q.len()];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for (i, qi) in q.iter().enumerate() {
                let scores: Vec<f64> = k
                    .iter()
                    .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, vj) in v.iter().enumerate() {
                    for c in cols.clone() {
                        out[i][c] += e[j] / z * vj[c];
                    }
                }
            }
        }
        self.linear(&out, &format!("{name}.proj"))
    }

    pub fn mlp(&self, x: &Mat, name: &str) -> Mat {
        let h = self.linear(x, &format!("{name}.fc1"));
        let h: Mat = h
            .iter()
            .map(|r| {
                r.iter()
                    .map(|&x| 0.5 * x * (1.0 + ((2.0 / PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh()))
                    .collect()
            })
            .collect();
        self.linear(&h, &format!("{name}.fc2"))
    }

    pub fn self_block(&self, x: &Mat, name: &str, heads: usize) -> Mat {
        let a = self.attention(&self.norm(x, &format!("{name}.norm1")), &self.norm(x, &format!("{name}.norm1")), &format!("{name}.attn"), heads);
        let x = add(x, &a);
        let m = self.mlp(&self.norm(&x, &format!("{name}.norm2")), &format!("{name}.mlp"));
        add(&x, &m)
    }

    pub fn cross_block(&self, lat: &Mat, ctx: &Mat, name: &str, heads: usize) -> Mat {
        let q = self.norm(lat, &format!("{name}.norm_q"));
        let kv = self.norm(ctx, &format!("{name}.norm_kv"));
        let a = self.attention(&q, &kv, &format!("{name}.attn"), heads);
        let x = add(lat, &a);
        let m = self.mlp(&self.norm(&x, &format!("{name}.norm2")), &format!("{name}.mlp"));
        add(&x, &m)
    }

    pub fn wavelength_pe(freqs: &[f64], alpha: f64, lambda: f64) -> Vec<f64> {
        let mut row: Vec<f64> = freqs.iter().map(|b| (2.0 * PI * alpha * lambda * b).cos()).collect();
        row.extend(freqs.iter().map(|b| (2.0 * PI * alpha * lambda * b).sin()));
        row
    }

    pub fn sinusoid(pos: f64, dim: usize) -> Vec<f64> {
        (0..dim)
            .map(|i| {
                let a = pos / 10000f64.powf(2.0 * (i / 2) as f64 / dim as f64);
                if i % 2 == 0 {
                    a.sin()
                } else {
                    a.cos()
                }
            })
            .collect()
    }

    /// Tokens `[C][D]` for one patch: flattened pixels of each channel
    /// through the shared projection.
    pub fn patch_tokens(&self, img: &SpectralImage, py: usize, px: usize) -> Mat {
        let p = self.cfg.patch_size;
        let rows: Mat = (0..img.channels())
            .map(|ch| {
                let mut v = Vec::new();
                for dy in 0..p {
                    for dx in 0..p {
                        v.push(img.pixel(py * p + dy, px * p + dx)[ch]);
                    }
                }
                v
            })
            .collect();
        self.linear(&rows, "patch_embed")
    }

    /// `(reps, tokens)` for one patch.
    pub fn spectral(&self, tokens: &Mat, waves: &[f64], freqs: &[f64], alpha: f64) -> (Mat, Mat) {
        let d = self.cfg.dim_spectral;
        let mut x: Mat = tokens
            .iter()
            .zip(waves)
            .map(|(t, &l)| t.iter().zip(Self::wavelength_pe(freqs, alpha, l)).map(|(a, b)| a + b).collect())
            .collect();
        let s = self.p("spectral_reps");
        let mut reps: Mat = (0..self.cfg.num_reps)
            .map(|k| {
                let pe = Self::sinusoid(k as f64, d);
                (0..d).map(|j| s.data()[k * d + j] + pe[j]).collect()
            })
            .collect();
        for i in 0..self.cfg.spectral_modules {
            x = self.self_block(&x, &format!("spectral.{i}.self"), self.cfg.heads_spectral);
            reps = self.cross_block(&reps, &x, &format!("spectral.{i}.cross"), self.cfg.heads_spectral);
        }
        (reps, x)
    }

    /// Spatial features `[hw][D]` for one image from aggregated spectral features.
    pub fn spatial(&self, agg: &Mat, h: usize, w: usize) -> Mat {
        let x = self.linear(&self.norm(agg, "transition.norm"), "transition.linear");
        let dp = self.cfg.dim_spatial;
        let mut x: Mat = x
            .iter()
            .enumerate()
            .map(|(cell, row)| {
                let mut pe = Self::sinusoid((cell / w) as f64, dp / 2);
                pe.extend(Self::sinusoid((cell % w) as f64, dp / 2));
                row.iter().zip(pe).map(|(a, b)| a + b).collect()
            })
            .collect();
        assert_eq!(x.len(), h * w);
        for i in 0..self.cfg.spatial_depth {
            x = self.self_block(&x, &format!("spatial.{i}"), self.cfg.heads_spatial);
        }
        self.norm(&x, "norm")
    }
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

