//! Momentum-contrast machinery: the key-encoder momentum update, the FIFO
//! memory bank of browsing-session embeddings, and the (2N+K)-way InfoNCE
//! loss.
//!
//! All vectors entering a dot product here are L2-normalized.

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::linalg::{self, dot};
use crate::params::Parameters;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub bank_size: usize,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: 0.1,
            bank_size: 8096,
            momentum: 0.999,
            batch_size: 128,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("cts.tau = {} must be positive", self.tau)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("cts.momentum = {} not in [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("cts.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// `θ_k ← m·θ_k + (1−m)·θ_q`, tensor by tensor. `theta_q` is read only.
pub fn momentum_update(theta_q: &EncoderParams, theta_k: &mut EncoderParams, m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(Error::Config(format!("momentum {m} not in [0, 1)")));
    }
    if !theta_q.same_shape(theta_k) {
        return Err(Error::Config("query and key encoders differ in shape".into()));
    }
    let src = theta_q.tensors();
    for ((_, k), (_, q)) in theta_k.tensors_mut().into_iter().zip(src) {
        for (kv, &qv) in k.data.iter_mut().zip(&q.data) {
            *kv = m * *kv + (1.0 - m) * qv;
        }
    }
    Ok(())
}

/// Fixed-capacity FIFO ring of unit-norm embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    dim: usize,
    capacity: usize,
    buffer: Vec<f64>,
    head: usize,
    filled: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Self {
        MemoryBank {
            dim,
            capacity,
            buffer: vec![0.0; capacity * dim],
            head: 0,
            filled: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn clear(&mut self) {
        self.head = 0;
        self.filled = 0;
    }

    /// Stored rows in storage order (not arrival order).
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.buffer[..self.filled * self.dim].chunks_exact(self.dim)
    }

    /// Stored rows from oldest to newest.
    pub fn rows_in_order(&self) -> Vec<Vec<f64>> {
        let start = if self.filled < self.capacity { 0 } else { self.head };
        (0..self.filled)
            .map(|i| {
                let r = (start + i) % self.capacity;
                self.buffer[r * self.dim..(r + 1) * self.dim].to_vec()
            })
            .collect()
    }

    /// Normalizes and appends rows, overwriting the oldest entries once
    /// full. The batch is rejected as a whole if any row is non-finite or
    /// zero, or has the wrong width.
    pub fn enqueue<V: AsRef<[f64]>>(&mut self, rows: &[V]) -> Result<()> {
        let mut normalized = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != self.dim {
                return Err(Error::Input(format!("bank row {i} has width {} != {}", r.len(), self.dim)));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input(format!("bank row {i} is not finite")));
            }
            let (n, norm) = linalg::l2_normalize(r);
            if norm == 0.0 {
                return Err(Error::Input(format!("bank row {i} has zero norm")));
            }
            normalized.push(n);
        }
        if self.capacity == 0 {
            return Ok(());
        }
        for n in normalized {
            let h = self.head;
            self.buffer[h * self.dim..(h + 1) * self.dim].copy_from_slice(&n);
            self.head = (h + 1) % self.capacity;
            self.filled = (self.filled + 1).min(self.capacity);
        }
        Ok(())
    }
}

/// Loss and embedding gradients from [`info_nce_loss`].
#[derive(Clone, Debug, PartialEq)]
pub struct InfoNceOutput {
    /// Sum over all 2N anchors.
    pub loss: f64,
    /// `ℓ_u` for each anchor, views_a first then views_b.
    pub per_anchor: Vec<f64>,
    pub grad_a: Vec<Vec<f64>>,
    pub grad_b: Vec<Vec<f64>>,
    /// Number of terms in each anchor's denominator: 2N − 1 + filled.
    pub denominator_terms: usize,
}

/// Temperature-scaled InfoNCE over paired views and the bank's negatives.
///
/// For every anchor `u` among the 2N views, with partner `u'`:
///
/// ```text
/// ℓ_u = −log exp(z_u·z_u'/τ) / (Σ_{i≠u} exp(z_u·z_i/τ) + Σ_k exp(z_u·m_k/τ))
/// ```
///
/// where `i` runs over all 2N views (so the partner is in the denominator
/// once) and `m_k` over the filled bank rows. Bank rows are constants.
pub fn info_nce_loss<V: AsRef<[f64]>>(
    views_a: &[V],
    views_b: &[V],
    bank: &MemoryBank,
    tau: f64,
) -> Result<InfoNceOutput> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    if views_a.len() != views_b.len() {
        return Err(Error::Input("views_a and views_b differ in length".into()));
    }
    let n = views_a.len();
    let z: Vec<&[f64]> = views_a.iter().chain(views_b).map(|v| v.as_ref()).collect();
    let two_n = z.len();
    let bank_rows: Vec<&[f64]> = bank.rows().collect();
    let mut grads = vec![vec![0.0; bank.dim().max(z.first().map_or(0, |v| v.len()))]; two_n];
    let mut per_anchor = Vec::with_capacity(two_n);
    let mut logits = Vec::with_capacity(two_n + bank_rows.len());

    for u in 0..two_n {
        let pos = (u + n) % two_n;
        logits.clear();
        let mut idx = Vec::with_capacity(two_n);
        for (i, zi) in z.iter().enumerate() {
            if i != u {
                logits.push(dot(z[u], zi) / tau);
                idx.push(i);
            }
        }
        for m in &bank_rows {
            logits.push(dot(z[u], m) / tau);
        }
        let lse = linalg::log_sum_exp(&logits);
        let pos_logit = dot(z[u], z[pos]) / tau;
        per_anchor.push(lse - pos_logit);

        // dℓ/dz_u = (Σ p_i z_i − z_pos) / τ ; dℓ/dz_i = p_i z_u / τ − [i = pos] z_u / τ
        let (gu_batch, gu_bank) = logits.split_at(idx.len());
        let mut gu = vec![0.0; z[u].len()];
        for (&i, &l) in idx.iter().zip(gu_batch) {
            let p = (l - lse).exp();
            linalg::axpy(p / tau, z[i], &mut gu);
            let coef = if i == pos { (p - 1.0) / tau } else { p / tau };
            linalg::axpy(coef, z[u], &mut grads[i]);
        }
        for (m, &l) in bank_rows.iter().zip(gu_bank) {
            let p = (l - lse).exp();
            linalg::axpy(p / tau, m, &mut gu);
        }
        linalg::axpy(-1.0 / tau, z[pos], &mut gu);
        linalg::add_assign(&mut grads[u], &gu);
    }

    let grad_b = grads.split_off(n);
    Ok(InfoNceOutput {
        loss: per_anchor.iter().sum(),
        per_anchor,
        grad_a: grads,
        grad_b,
        denominator_terms: two_n.saturating_sub(1) + bank_rows.len(),
    })
}
