/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank with unit peak, rows indexed by band.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `[n_mels][n_bins]`
    pub weights: Vec<Vec<f64>>,
    /// Band edges in Hz; band `m` spans `edges[m]..edges[m + 2]`, centered on `edges[m + 1]`.
    pub edges: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Self {
        let n_bins = n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let weights = (0..n_mels)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        let up = (f - l) / (c - l);
                        let down = (r - f) / (r - c);
                        up.min(down).max(0.0)
                    })
                    .collect()
            })
            .collect();
        MelFilterbank { weights, edges }
    }

    pub fn n_mels(&self) -> usize {
        self.weights.len()
    }

    pub fn n_bins(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn center_hz(&self, band: usize) -> f64 {
        self.edges[band + 1]
    }

    /// Band whose center frequency is nearest `hz`.
    pub fn nearest_band(&self, hz: f64) -> usize {
        (0..self.n_mels())
            .min_by(|&a, &b| {
                (self.center_hz(a) - hz)
                    .abs()
                    .total_cmp(&(self.center_hz(b) - hz).abs())
            })
            .unwrap_or(0)
    }

    /// Width in Hz between neighbouring band centers around `band`.
    pub fn bandwidth_hz(&self, band: usize) -> f64 {
        (self.edges[band + 2] - self.edges[band]) / 2.0
    }

    pub fn apply(&self, magnitude: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|row| row.iter().zip(magnitude).map(|(w, m)| w * m).sum())
            .collect()
    }

    /// Ridge-regularized pseudo-inverse `W^T (W W^T + lambda I)^-1`, shape `[n_bins][n_mels]`.
    pub fn pseudo_inverse(&self) -> Vec<Vec<f64>> {
        let m = self.n_mels();
        let mut gram = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in i..m {
                let v: f64 = self.weights[i].iter().zip(&self.weights[j]).map(|(a, b)| a * b).sum();
                gram[i][j] = v;
                gram[j][i] = v;
            }
        }
        let trace: f64 = (0..m).map(|i| gram[i][i]).sum();
        let ridge = 1e-6 * trace / m as f64;
        for (i, row) in gram.iter_mut().enumerate() {
            row[i] += ridge;
        }
        let chol = cholesky(&gram);
        let n_bins = self.n_bins();
        let mut pinv = vec![vec![0.0; m]; n_bins];
        // Row k of the pseudo-inverse solves gram * y = W[:, k].
        for (k, out) in pinv.iter_mut().enumerate() {
            let rhs: Vec<f64> = (0..m).map(|i| self.weights[i][k]).collect();
            *out = cholesky_solve(&chol, &rhs);
        }
        pinv
    }
}

fn cholesky(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                l[i][j] = (a[i][i] - s).max(1e-300).sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    l
}

fn cholesky_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i][k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k][i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i][i];
    }
    x
}
