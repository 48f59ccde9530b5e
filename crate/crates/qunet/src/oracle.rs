//! Independent brute-force verification of the protocols.
//!
//! Everything here works on raw dense amplitude vectors with fully
//! materialized operator matrices and keeps every site in the register until
//! the end of a branch; no monomial fast paths, no site dropping, no message
//! bus. The point is a second computational route for the same protocols, so
//! enumeration results can be compared against the `protocols` module and
//! monomial operators against their dense forms.
//!
//! The module also carries the phase-pinning procedure: the correction-phase
//! signs the protocol sources leave ambiguous are fixed by demanding that
//! every enumerated branch of every protocol reconstructs the encoded state
//! exactly. [`pin_phases`] re-derives that convention and checks it is
//! unique; the surviving constants are committed as
//! [`PhaseConvention::pinned`]. It runs in the test pipeline, not at
//! runtime.

use num_complex::Complex64;
use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::gates::{LocalOperator, PhaseConvention};
use crate::protocols::{ExecutionMode, ProtocolConfig, ProtocolKind};
use crate::qudit_core::{Amp, SiteSpec, StateVector, ZERO_PROB};

/// Branch cap for [`enumerate_branches`].
pub const MAX_ORACLE_BRANCHES: u64 = 1_000_000;
/// Register cap for [`dense_crosscheck`].
pub const MAX_CROSSCHECK_DIM: usize = 4096;

/// One fully evaluated measurement branch.
#[derive(Debug, Clone)]
pub struct BranchRecord {
    /// Flattened outcome tuple in measurement order.
    pub outcome: Vec<usize>,
    pub probability: f64,
    /// Joint final state over the receiver legs, ascending receiver order.
    pub final_state: StateVector,
    /// Fidelity against the expected encoded state.
    pub fidelity: f64,
}

/// Dense register: site dimensions plus one amplitude per flat index.
#[derive(Clone)]
struct Reg {
    dims: Vec<usize>,
    amps: Vec<Amp>,
}

impl Reg {
    /// Tensor a list of flat vectors, first factor = lowest stride. The
    /// `dims` list gives each factor's length; factors may themselves span
    /// several uniform sites, relabelled afterwards by the caller.
    fn product(factors: &[Vec<Amp>]) -> Vec<Amp> {
        let mut amps = vec![Complex64::new(1.0, 0.0)];
        for f in factors {
            let mut next = vec![Complex64::new(0.0, 0.0); amps.len() * f.len()];
            for (j, &b) in f.iter().enumerate() {
                if b == Complex64::new(0.0, 0.0) {
                    continue;
                }
                for (i, &a) in amps.iter().enumerate() {
                    next[j * amps.len() + i] = a * b;
                }
            }
            amps = next;
        }
        amps
    }

    fn stride(&self, site: usize) -> usize {
        self.dims[..site].iter().product()
    }

    fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    fn scale(&mut self, f: f64) {
        for a in &mut self.amps {
            *a *= f;
        }
    }

    /// Apply a dense matrix along `sites` (first listed site = lowest matrix
    /// stride). Walks every flat index and resolves the selected subindex by
    /// division, so it shares no code with the fast path.
    fn apply(&mut self, sites: &[usize], mat: &[Amp], mdim: usize) {
        let strides: Vec<usize> = sites.iter().map(|&s| self.stride(s)).collect();
        let dims: Vec<usize> = sites.iter().map(|&s| self.dims[s]).collect();
        debug_assert_eq!(dims.iter().product::<usize>(), mdim);
        let mut offsets = vec![0usize; mdim];
        for (t, off) in offsets.iter_mut().enumerate() {
            let mut rest = t;
            for (&dim, &stride) in dims.iter().zip(&strides) {
                *off += (rest % dim) * stride;
                rest /= dim;
            }
        }
        let mut out = vec![Complex64::new(0.0, 0.0); self.amps.len()];
        for (k, slot) in out.iter_mut().enumerate() {
            let mut t = 0usize;
            let mut mul = 1usize;
            for (&dim, &stride) in dims.iter().zip(&strides) {
                t += ((k / stride) % dim) * mul;
                mul *= dim;
            }
            let base = k - offsets[t];
            let row = &mat[t * mdim..(t + 1) * mdim];
            let mut acc = Complex64::new(0.0, 0.0);
            for (s, &m) in row.iter().enumerate() {
                if m != Complex64::new(0.0, 0.0) {
                    acc += m * self.amps[base + offsets[s]];
                }
            }
            *slot = acc;
        }
        self.amps = out;
    }

    /// Contract two sites against a bra vector (indexed `la + da * lb`),
    /// removing them from the register.
    fn contract_pair(&self, a: usize, b: usize, bra: &[Amp]) -> Reg {
        let da = self.dims[a];
        let db = self.dims[b];
        let sa = self.stride(a);
        let sb = self.stride(b);
        let keep: Vec<usize> = (0..self.dims.len()).filter(|&s| s != a && s != b).collect();
        let new_dims: Vec<usize> = keep.iter().map(|&s| self.dims[s]).collect();
        let new_len: usize = new_dims.iter().product();
        let mut amps = vec![Complex64::new(0.0, 0.0); new_len];
        for (kn, amp) in amps.iter_mut().enumerate() {
            let mut base = 0usize;
            let mut rest = kn;
            for &s in &keep {
                base += (rest % self.dims[s]) * self.stride(s);
                rest /= self.dims[s];
            }
            let mut acc = Complex64::new(0.0, 0.0);
            for la in 0..da {
                for lb in 0..db {
                    acc += bra[la + da * lb].conj() * self.amps[base + la * sa + lb * sb];
                }
            }
            *amp = acc;
        }
        Reg { dims: new_dims, amps }
    }
}

fn root(modulus: usize, exponent: i64) -> Amp {
    let m = modulus as i64;
    let e = exponent.rem_euclid(m);
    let angle = TAU * e as f64 / m as f64;
    Complex64::new(angle.cos(), angle.sin())
}

fn mixed_strides(dims: &[usize]) -> Vec<usize> {
    (0..dims.len()).map(|i| dims[..i].iter().product()).collect()
}

/// `|psi_mn>` as a flat `d^2` vector, first ket = lower stride.
fn bell_vec(d: usize, m: usize, n: usize) -> Vec<Amp> {
    let mut v = vec![Complex64::new(0.0, 0.0); d * d];
    let scale = 1.0 / (d as f64).sqrt();
    for l in 0..d {
        v[l + d * ((l + m) % d)] = root(d, (n * l) as i64) * scale;
    }
    v
}

fn bell_projector_matrix(d: usize, m: usize, n: usize) -> Vec<Amp> {
    let v = bell_vec(d, m, n);
    let dd = d * d;
    let mut mat = vec![Complex64::new(0.0, 0.0); dd * dd];
    for i in 0..dd {
        for j in 0..dd {
            mat[i * dd + j] = v[i] * v[j].conj();
        }
    }
    mat
}

/// Digit Fourier transform on every digit except `keep` (1-based), built
/// straight from the mixed-radix formula.
fn dft_except_matrix(dims: &[usize], keep: usize) -> Vec<Amp> {
    let d: usize = dims.iter().product();
    let strides = mixed_strides(dims);
    let norm: f64 = dims
        .iter()
        .enumerate()
        .filter(|(j, _)| j + 1 != keep)
        .map(|(_, &dj)| 1.0 / (dj as f64).sqrt())
        .product();
    let mut mat = vec![Complex64::new(0.0, 0.0); d * d];
    for s in 0..d {
        for t in 0..d {
            let mut keep_matches = true;
            let mut exp = 0i64;
            for (j, (&dj, &pj)) in dims.iter().zip(&strides).enumerate() {
                let sj = (s / pj) % dj;
                let tj = (t / pj) % dj;
                if j + 1 == keep {
                    if sj != tj {
                        keep_matches = false;
                        break;
                    }
                } else {
                    exp += (sj as i64 * tj as i64 % dj as i64) * (d as i64 / dj as i64);
                }
            }
            if keep_matches {
                mat[t * d + s] = root(d, exp) * norm;
            }
        }
    }
    mat
}

fn shift_matrix(d: usize, s: usize) -> Vec<Amp> {
    let mut mat = vec![Complex64::new(0.0, 0.0); d * d];
    for x in 0..d {
        mat[((x + s) % d) * d + x] = Complex64::new(1.0, 0.0);
    }
    mat
}

/// Bell-outcome correction `|x> -> omega^{sign n (x -+ m)} |x -+ m>`.
fn bell_correction_matrix(d: usize, m: usize, n: usize, conv: PhaseConvention) -> Vec<Amp> {
    let mut mat = vec![Complex64::new(0.0, 0.0); d * d];
    for x in 0..d {
        let target = if conv.bell_shift_subtracts { (x + d - m) % d } else { (x + m) % d };
        let exp = conv.bell_phase_sign as i64 * (n as i64) * (target as i64);
        mat[target * d + x] = root(d, exp);
    }
    mat
}

/// Projector onto `{ off + k p_i : k < d_i }` for receiver `i`'s outcome.
fn digit_projector_matrix(dims: &[usize], receiver: usize, outcome: usize) -> Vec<Amp> {
    let d: usize = dims.iter().product();
    let strides = mixed_strides(dims);
    let mut off = 0usize;
    let mut rest = outcome;
    for (j, &dj) in dims.iter().enumerate() {
        if j + 1 == receiver {
            continue;
        }
        off += (rest % dj) * strides[j];
        rest /= dj;
    }
    let mut mat = vec![Complex64::new(0.0, 0.0); d * d];
    for k in 0..dims[receiver - 1] {
        let idx = off + k * strides[receiver - 1];
        mat[idx * d + idx] = Complex64::new(1.0, 0.0);
    }
    mat
}

/// Diagonal peer-phase matrix `|x> -> omega^{sign (d/d_i) digit_i(x) m} |x>`.
fn peer_phase_matrix(
    dims: &[usize],
    receiver: usize,
    reported: usize,
    conv: PhaseConvention,
) -> Vec<Amp> {
    let d: usize = dims.iter().product();
    let strides = mixed_strides(dims);
    let di = dims[receiver - 1];
    let pi = strides[receiver - 1];
    let mut mat = vec![Complex64::new(0.0, 0.0); d * d];
    for x in 0..d {
        let ki = (x / pi) % di;
        let exp = conv.peer_phase_sign as i64 * (d as i64 / di as i64) * ki as i64 * reported as i64;
        mat[x * d + x] = root(d, exp);
    }
    mat
}

/// Digit value at `site` (1-based) in a tuple over all sites except
/// `skipped`.
fn digit_at(digits: &[usize], skipped: usize, site: usize) -> usize {
    digits[if site < skipped { site - 1 } else { site - 2 }]
}

/// Complementary digits of receiver `i`'s flat outcome, ascending site
/// order.
fn outcome_digits(dims: &[usize], receiver: usize, outcome: usize) -> Vec<usize> {
    let mut rest = outcome;
    let mut digits = Vec::new();
    for (j, &dj) in dims.iter().enumerate() {
        if j + 1 == receiver {
            continue;
        }
        digits.push(rest % dj);
        rest /= dj;
    }
    digits
}

/// Position of the first receiver leg in each protocol's register layout.
fn receiver_base(kind: ProtocolKind, n: usize) -> usize {
    match kind {
        // [in_1..in_N, sleg_1..sleg_N, receiver leg].
        ProtocolKind::ManyToOne => 2 * n,
        // [encoded input, rleg_1..rleg_N, sender leg].
        ProtocolKind::OneToMany => 1,
        // [in_1..in_N, sleg_1..sleg_N, rleg_1..rleg_N].
        ProtocolKind::ManyToMany => 2 * n,
        // [in_B, in_A, pair_B, pair_A, rleg_1, rleg_2].
        ProtocolKind::TwoWay => 4,
    }
}

struct OracleRun<'a> {
    cfg: &'a ProtocolConfig,
    dims: Vec<usize>,
    recv_dims: Vec<usize>,
    d: usize,
    conv: PhaseConvention,
    expected: Vec<Amp>,
    expected_dims: Vec<usize>,
    prob_stack: Vec<f64>,
    records: Vec<BranchRecord>,
    /// Abort the walk as soon as any branch misses this fidelity, if set.
    min_required: Option<f64>,
    failed: bool,
}

impl<'a> OracleRun<'a> {
    fn new(cfg: &'a ProtocolConfig, conv: PhaseConvention, min_required: Option<f64>) -> Result<Self> {
        cfg.validate()?;
        let dims = cfg.dims.clone();
        let recv_dims = cfg.receiver_dims();
        let d: usize = dims.iter().product();
        let encoded = encoded_register(cfg)?;

        let receivers = recv_dims.len();
        let (expected, expected_dims) = if cfg.kind == ProtocolKind::ManyToOne {
            (encoded, vec![d])
        } else {
            let strides = mixed_strides(&recv_dims);
            let mut joint = vec![Complex64::new(0.0, 0.0); d.pow(receivers as u32)];
            for (k, &c) in encoded.iter().enumerate() {
                let mut idx = 0usize;
                let mut site_stride = 1usize;
                for (r, &er) in recv_dims.iter().enumerate() {
                    let digit = (k / strides[r]) % er;
                    idx += digit * strides[r] * site_stride;
                    site_stride *= d;
                }
                joint[idx] += c;
            }
            (joint, vec![d; receivers])
        };

        Ok(OracleRun {
            cfg,
            dims,
            recv_dims,
            d,
            conv,
            expected,
            expected_dims,
            prob_stack: Vec::new(),
            records: Vec::new(),
            min_required,
            failed: false,
        })
    }

    fn embedded_input(&self, inputs: &[StateVector], i: usize) -> Vec<Amp> {
        let p: usize = self.dims[..i].iter().product();
        let mut v = vec![Complex64::new(0.0, 0.0); self.d];
        for (k, &a) in inputs[i].amps().iter().enumerate() {
            v[k * p] = a;
        }
        v
    }

    fn ghz(&self, legs: usize) -> Vec<Amp> {
        let d = self.d;
        let mut v = vec![Complex64::new(0.0, 0.0); d.pow(legs as u32)];
        let scale = 1.0 / (d as f64).sqrt();
        let stride_sum: usize = (0..legs).map(|s| d.pow(s as u32)).sum();
        for k in 0..d {
            v[k * stride_sum] = Complex64::new(scale, 0.0);
        }
        v
    }

    fn run(mut self) -> Result<Vec<BranchRecord>> {
        let inputs = self.cfg.resolve_inputs()?;
        let n = self.dims.len();
        let d = self.d;

        match self.cfg.kind {
            ProtocolKind::ManyToOne | ProtocolKind::ManyToMany => {
                let receivers = if self.cfg.kind == ProtocolKind::ManyToOne { 1 } else { n };
                let legs = n + receivers;
                let mut factors: Vec<Vec<Amp>> =
                    (0..n).map(|i| self.embedded_input(&inputs, i)).collect();
                factors.push(self.ghz(legs));
                let reg = Reg { dims: vec![d; n + legs], amps: Reg::product(&factors) };
                self.sender_rounds(reg, 1, &mut Vec::new(), receivers)?;
            }
            ProtocolKind::OneToMany => {
                let factors = vec![encoded_register(self.cfg)?, self.ghz(n + 1)];
                let reg = Reg { dims: vec![d; n + 2], amps: Reg::product(&factors) };
                self.bob_bell_round(reg)?;
            }
            ProtocolKind::TwoWay => {
                let zero = {
                    let mut v = vec![Complex64::new(0.0, 0.0); d];
                    v[0] = Complex64::new(1.0, 0.0);
                    v
                };
                let factors = vec![
                    self.embedded_input(&inputs, 0),
                    self.embedded_input(&inputs, 1),
                    self.ghz(2),
                    zero.clone(),
                    zero,
                ];
                let mut reg = Reg { dims: vec![d; 6], amps: Reg::product(&factors) };
                let xor = {
                    let dd = d * d;
                    let mut m = vec![Complex64::new(0.0, 0.0); dd * dd];
                    for k in 0..d {
                        for l in 0..d {
                            m[(k + d * ((l + k) % d)) * dd + (k + d * l)] = Complex64::new(1.0, 0.0);
                        }
                    }
                    m
                };
                // Alice grows rleg 1 from pair_A, Bob grows rleg 2 from pair_B.
                reg.apply(&[3, 4], &xor, d * d);
                reg.apply(&[2, 5], &xor, d * d);
                self.sender_rounds(reg, 1, &mut Vec::new(), 2)?;
            }
        }
        if self.failed {
            return Err(Error::NoConsistentConvention);
        }
        Ok(self.records)
    }

    /// Sender `i` spreads its input and measures `(in_i, sleg_i)`; every
    /// later sender unshifts its own leg, receiver 1 takes the full
    /// correction, receivers 2.. the bare shift.
    fn sender_rounds(
        &mut self,
        reg: Reg,
        sender: usize,
        outcome: &mut Vec<usize>,
        receivers: usize,
    ) -> Result<()> {
        if self.failed {
            return Ok(());
        }
        let d = self.d;
        let n = self.dims.len();
        if sender > n {
            match self.cfg.kind {
                ProtocolKind::ManyToOne => return self.finish(reg, outcome),
                _ => return self.receiver_rounds(reg, 1, outcome, receivers),
            }
        }
        let in_site = sender - 1;
        let leg_site = match self.cfg.kind {
            ProtocolKind::TwoWay => 1 + sender, // pair legs at 2 and 3
            _ => n + sender - 1,
        };
        let rbase = receiver_base(self.cfg.kind, n);
        let mut spread = reg;
        spread.apply(&[in_site], &dft_except_matrix(&self.dims, sender), d);
        for m in 0..d {
            for nn in 0..d {
                if self.failed {
                    return Ok(());
                }
                let mut branch = spread.clone();
                branch.apply(&[in_site, leg_site], &bell_projector_matrix(d, m, nn), d * d);
                let p = branch.norm_sqr();
                if p < ZERO_PROB {
                    continue;
                }
                branch.scale(1.0 / p.sqrt());
                for later in sender + 1..=n {
                    let later_leg = match self.cfg.kind {
                        ProtocolKind::TwoWay => 1 + later,
                        _ => n + later - 1,
                    };
                    branch.apply(&[later_leg], &shift_matrix(d, (d - m) % d), d);
                }
                branch.apply(&[rbase], &bell_correction_matrix(d, m, nn, self.conv), d);
                for r in 2..=receivers {
                    branch.apply(&[rbase + r - 1], &shift_matrix(d, (d - m) % d), d);
                }
                outcome.push(m);
                outcome.push(nn);
                self.prob_stack.push(p);
                self.sender_rounds(branch, sender + 1, outcome, receivers)?;
                self.prob_stack.pop();
                outcome.pop();
                outcome.pop();
            }
        }
        Ok(())
    }

    fn bob_bell_round(&mut self, reg: Reg) -> Result<()> {
        let d = self.d;
        let n = self.recv_dims.len();
        for m in 0..d {
            for nn in 0..d {
                if self.failed {
                    return Ok(());
                }
                let mut branch = reg.clone();
                branch.apply(&[0, n + 1], &bell_projector_matrix(d, m, nn), d * d);
                let p = branch.norm_sqr();
                if p < ZERO_PROB {
                    continue;
                }
                branch.scale(1.0 / p.sqrt());
                branch.apply(&[1], &bell_correction_matrix(d, m, nn, self.conv), d);
                for r in 2..=n {
                    branch.apply(&[r], &shift_matrix(d, (d - m) % d), d);
                }
                let mut outcome = vec![m, nn];
                self.prob_stack.push(p);
                self.receiver_rounds(branch, 1, &mut outcome, n)?;
                self.prob_stack.pop();
            }
        }
        Ok(())
    }

    /// Receiver rounds: spread, digit projector, relabel; the peer phases
    /// are applied at the end from the recorded outcomes.
    fn receiver_rounds(
        &mut self,
        reg: Reg,
        receiver: usize,
        outcome: &mut Vec<usize>,
        receivers: usize,
    ) -> Result<()> {
        if self.failed {
            return Ok(());
        }
        let d = self.d;
        let rbase = receiver_base(self.cfg.kind, self.dims.len());
        if receiver > receivers {
            let mut finished = reg;
            let outcomes = outcome[outcome.len() - receivers..].to_vec();
            for i in 1..=receivers {
                for j in 1..=receivers {
                    if i == j {
                        continue;
                    }
                    let reported = if self.conv.peer_uses_reported {
                        digit_at(&outcome_digits(&self.recv_dims, j, outcomes[j - 1]), j, i)
                    } else {
                        digit_at(&outcome_digits(&self.recv_dims, i, outcomes[i - 1]), i, j)
                    };
                    finished.apply(
                        &[rbase + i - 1],
                        &peer_phase_matrix(&self.recv_dims, i, reported, self.conv),
                        d,
                    );
                }
            }
            return self.finish(finished, outcome);
        }
        let site = rbase + receiver - 1;
        let mut spread = reg;
        spread.apply(&[site], &dft_except_matrix(&self.recv_dims, receiver), d);
        let family = d / self.recv_dims[receiver - 1];
        for o in 0..family {
            if self.failed {
                return Ok(());
            }
            let mut branch = spread.clone();
            branch.apply(&[site], &digit_projector_matrix(&self.recv_dims, receiver, o), d);
            let p = branch.norm_sqr();
            if p < ZERO_PROB {
                continue;
            }
            branch.scale(1.0 / p.sqrt());
            // Relabel: shift away the measured offset.
            let digits = outcome_digits(&self.recv_dims, receiver, o);
            let strides = mixed_strides(&self.recv_dims);
            let mut off = 0usize;
            let mut it = digits.iter();
            for (j, &pj) in strides.iter().enumerate() {
                if j + 1 == receiver {
                    continue;
                }
                off += it.next().unwrap() * pj;
            }
            branch.apply(&[site], &shift_matrix(d, (d - off % d) % d), d);
            outcome.push(o);
            self.prob_stack.push(p);
            self.receiver_rounds(branch, receiver + 1, outcome, receivers)?;
            self.prob_stack.pop();
            outcome.pop();
        }
        Ok(())
    }

    /// Contract away every measured pair, compare with the expected state,
    /// and record the branch.
    fn finish(&mut self, reg: Reg, outcome: &[usize]) -> Result<()> {
        let d = self.d;
        let mut rest = reg;
        match self.cfg.kind {
            ProtocolKind::ManyToOne | ProtocolKind::ManyToMany => {
                let n = self.dims.len();
                for i in 0..n {
                    // After i contractions in_i sits at 0 and its leg at n - i.
                    let (m, nn) = (outcome[2 * i], outcome[2 * i + 1]);
                    rest = rest.contract_pair(0, n - i, &bell_vec(d, m, nn));
                }
            }
            ProtocolKind::TwoWay => {
                // [in_B, in_A, pair_B, pair_A, ..]: contract (0, 2), then the
                // shrunken (0, 1).
                rest = rest.contract_pair(0, 2, &bell_vec(d, outcome[0], outcome[1]));
                rest = rest.contract_pair(0, 1, &bell_vec(d, outcome[2], outcome[3]));
            }
            ProtocolKind::OneToMany => {
                let last = rest.dims.len() - 1;
                rest = rest.contract_pair(0, last, &bell_vec(d, outcome[0], outcome[1]));
            }
        }
        debug_assert_eq!(rest.dims.len(), self.expected_dims.len());
        let norm = rest.norm_sqr();
        let inv = 1.0 / norm.sqrt();
        let mut final_amps = rest.amps;
        for a in &mut final_amps {
            *a *= inv;
        }
        let fidelity = {
            let mut acc = Complex64::new(0.0, 0.0);
            for (e, a) in self.expected.iter().zip(&final_amps) {
                acc += e.conj() * a;
            }
            acc.norm_sqr()
        };
        if let Some(min) = self.min_required {
            if fidelity < min {
                self.failed = true;
                return Ok(());
            }
        }
        let probability: f64 = self.prob_stack.iter().product();
        let spec = SiteSpec::with_max_dim(&self.expected_dims, self.cfg.max_dim)?;
        self.records.push(BranchRecord {
            outcome: outcome.to_vec(),
            probability,
            final_state: StateVector::from_normalized(spec, final_amps),
            fidelity,
        });
        Ok(())
    }
}

/// The encoded register value `sum_k prod_i a^i_{k_i} |k>` as a flat vector.
fn encoded_register(cfg: &ProtocolConfig) -> Result<Vec<Amp>> {
    let inputs = cfg.resolve_inputs()?;
    let d: usize = cfg.dims.iter().product();
    let mut encoded = vec![Complex64::new(0.0, 0.0); d];
    for (k, amp) in encoded.iter_mut().enumerate() {
        let mut prod = Complex64::new(1.0, 0.0);
        let mut rest = k;
        for (i, &di) in cfg.dims.iter().enumerate() {
            prod *= inputs[i].amps()[rest % di];
            rest /= di;
        }
        *amp = prod;
    }
    Ok(encoded)
}

/// Exhaustively evaluate every measurement branch of a configuration with
/// fully dense arithmetic. One record per nonzero-probability outcome tuple;
/// probabilities sum to 1.
pub fn enumerate_branches(config: &ProtocolConfig) -> Result<Vec<BranchRecord>> {
    enumerate_with_convention(config, PhaseConvention::pinned(), None)
}

fn enumerate_with_convention(
    config: &ProtocolConfig,
    conv: PhaseConvention,
    min_required: Option<f64>,
) -> Result<Vec<BranchRecord>> {
    let mut cfg = config.clone();
    cfg.mode = ExecutionMode::Enumerate;
    let d: u64 = cfg.dims.iter().product::<usize>() as u64;
    let n = cfg.dims.len() as u32;
    let proj: u64 = cfg.receiver_dims().iter().map(|&e| d / e as u64).product();
    let count = match cfg.kind {
        ProtocolKind::ManyToOne => d.saturating_pow(2 * n),
        ProtocolKind::OneToMany => d * d * proj,
        ProtocolKind::ManyToMany | ProtocolKind::TwoWay => {
            d.saturating_pow(2 * n).saturating_mul(proj)
        }
    };
    if count > MAX_ORACLE_BRANCHES {
        return Err(Error::BranchExplosion { count, max: MAX_ORACLE_BRANCHES });
    }
    OracleRun::new(&cfg, conv, min_required)?.run()
}

/// The resolved phase-convention record.
#[derive(Debug, Clone)]
pub struct ConventionReport {
    pub convention: PhaseConvention,
    /// Dimension sets every branch was verified on.
    pub dims_checked: Vec<Vec<usize>>,
}

/// Determine the correction-phase convention operationally: enumerate every
/// candidate sign assignment and keep those under which every branch of the
/// many-to-one and one-to-many protocols reaches fidelity 1 within 1e-9 on
/// the dimension sets (2,2), (2,3), (3,2). Exactly one assignment must
/// survive.
pub fn pin_phases() -> Result<ConventionReport> {
    let dims_checked: Vec<Vec<usize>> = vec![vec![2, 2], vec![2, 3], vec![3, 2]];
    let survivors = surviving_conventions(&PhaseConvention::candidates(), &dims_checked)?;
    match survivors.len() {
        0 => Err(Error::NoConsistentConvention),
        1 => Ok(ConventionReport { convention: survivors[0], dims_checked }),
        k => Err(Error::AmbiguousConvention { survivors: k }),
    }
}

/// The subset of `candidates` under which every enumerated branch of both
/// directed protocols reconstructs exactly, across the given dimension sets.
pub fn surviving_conventions(
    candidates: &[PhaseConvention],
    dims_list: &[Vec<usize>],
) -> Result<Vec<PhaseConvention>> {
    let mut survivors = Vec::new();
    'cand: for &conv in candidates {
        for dims in dims_list {
            for kind in [ProtocolKind::ManyToOne, ProtocolKind::OneToMany] {
                let cfg = ProtocolConfig::new(
                    kind,
                    dims,
                    crate::protocols::InputSource::Seeded(pin_seed(dims, kind)),
                    ExecutionMode::Enumerate,
                );
                match enumerate_with_convention(&cfg, conv, Some(1.0 - 1e-9)) {
                    Ok(_) => {}
                    Err(Error::NoConsistentConvention) => continue 'cand,
                    Err(e) => return Err(e),
                }
            }
        }
        survivors.push(conv);
    }
    Ok(survivors)
}

fn pin_seed(dims: &[usize], kind: ProtocolKind) -> u64 {
    let mut s = match kind {
        ProtocolKind::ManyToOne => 101u64,
        ProtocolKind::OneToMany => 202,
        _ => 303,
    };
    for &d in dims {
        s = s.wrapping_mul(31).wrapping_add(d as u64);
    }
    s
}

/// Apply an operator sequence through both routes — the fast-path
/// [`StateVector::apply_on_sites`] and this module's dense embedding of the
/// fully materialized matrices — and return the largest elementwise
/// deviation seen after any step. Projector steps are compared unnormalized.
pub fn dense_crosscheck(state: &StateVector, ops: &[(Vec<usize>, LocalOperator)]) -> Result<f64> {
    if state.spec().total_dim() > MAX_CROSSCHECK_DIM {
        return Err(Error::CapacityExceeded {
            requested: state.spec().total_dim(),
            max: MAX_CROSSCHECK_DIM,
        });
    }
    let mut fast = state.clone();
    let mut dense = Reg { dims: state.spec().dims().to_vec(), amps: state.amps().to_vec() };
    let mut max_dev = 0.0_f64;
    for (sites, op) in ops {
        fast = fast.apply_on_sites(sites, op)?;
        dense.apply(sites, &op.to_dense(), op.dim());
        for (a, b) in fast.amps().iter().zip(&dense.amps) {
            max_dev = max_dev.max((a - b).norm());
        }
    }
    Ok(max_dev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocols::{self, InputSource};

    #[test]
    fn single_sender_four_uniform_branches() {
        let cfg = ProtocolConfig::new(
            ProtocolKind::ManyToOne,
            &[2],
            InputSource::Seeded(1),
            ExecutionMode::Enumerate,
        );
        let records = enumerate_branches(&cfg).unwrap();
        assert_eq!(records.len(), 4);
        let mut total = 0.0;
        for r in &records {
            assert!((r.probability - 0.25).abs() < 1e-12);
            assert!(r.fidelity > 1.0 - 1e-9);
            total += r.probability;
        }
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn one_to_many_branch_count_and_probability_sum() {
        let cfg = ProtocolConfig::new(
            ProtocolKind::OneToMany,
            &[2, 2],
            InputSource::Seeded(4),
            ExecutionMode::Enumerate,
        );
        let records = enumerate_branches(&cfg).unwrap();
        assert_eq!(records.len(), 64);
        let total: f64 = records.iter().map(|r| r.probability).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn branch_count_formulas() {
        for dims in [vec![2usize, 2], vec![2, 3]] {
            let d: usize = dims.iter().product();
            let cfg = ProtocolConfig::new(
                ProtocolKind::ManyToOne,
                &dims,
                InputSource::Seeded(9),
                ExecutionMode::Enumerate,
            );
            assert_eq!(enumerate_branches(&cfg).unwrap().len(), d.pow(2 * dims.len() as u32));
            let cfg = ProtocolConfig::new(
                ProtocolKind::OneToMany,
                &dims,
                InputSource::Seeded(9),
                ExecutionMode::Enumerate,
            );
            let proj: usize = dims.iter().map(|&e| d / e).product();
            assert_eq!(enumerate_branches(&cfg).unwrap().len(), d * d * proj);
        }
    }

    #[test]
    fn oracle_agrees_with_protocol_path() {
        let matrix: Vec<(ProtocolKind, Vec<usize>)> = vec![
            (ProtocolKind::ManyToOne, vec![2, 2]),
            (ProtocolKind::ManyToOne, vec![2, 3]),
            (ProtocolKind::ManyToOne, vec![3, 2]),
            (ProtocolKind::OneToMany, vec![2, 2]),
            (ProtocolKind::OneToMany, vec![2, 3]),
            (ProtocolKind::ManyToMany, vec![2, 2]),
            (ProtocolKind::TwoWay, vec![2, 2]),
        ];
        for (kind, dims) in matrix {
            let cfg =
                ProtocolConfig::new(kind, &dims, InputSource::Seeded(77), ExecutionMode::Enumerate);
            let oracle = enumerate_branches(&cfg).unwrap();
            let main = protocols::run(&cfg).unwrap();
            assert_eq!(oracle.len(), main.branches.len(), "{} {:?}", kind.label(), dims);
            for (o, m) in oracle.iter().zip(&main.branches) {
                assert_eq!(o.outcome, m.outcome);
                assert!((o.probability - m.probability).abs() < 1e-12);
                assert!((o.fidelity - m.fidelity).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pinning_finds_exactly_one_convention() {
        let report = pin_phases().unwrap();
        assert_eq!(report.convention, PhaseConvention::pinned());
        assert_eq!(report.dims_checked.len(), 3);
    }

    #[test]
    fn flipped_sign_is_inconsistent() {
        let mut flipped = PhaseConvention::pinned();
        flipped.bell_phase_sign = -1;
        let survivors =
            surviving_conventions(&[flipped], &[vec![2, 2], vec![2, 3], vec![3, 2]]).unwrap();
        assert!(survivors.is_empty());
    }

    #[test]
    fn convention_stable_across_dims() {
        let a = surviving_conventions(&PhaseConvention::candidates(), &[vec![2, 2]]).unwrap();
        let b = surviving_conventions(&PhaseConvention::candidates(), &[vec![2, 3]]).unwrap();
        assert!(a.contains(&PhaseConvention::pinned()));
        assert!(b.contains(&PhaseConvention::pinned()));
    }

    #[test]
    fn crosscheck_identity_sequence() {
        let s = crate::gates::resource_state(3, 2).unwrap();
        let id = crate::gates::identity(3);
        let dev = dense_crosscheck(&s, &[(vec![0], id.clone()), (vec![1], id)]).unwrap();
        assert_eq!(dev, 0.0);
    }

    #[test]
    fn crosscheck_monomial_gates() {
        let s = crate::gates::resource_state(4, 2).unwrap();
        let ops = vec![
            (vec![0], crate::gates::mod_add_gate(4, 3).unwrap()),
            (vec![1], crate::gates::phase_gate(4, 2).unwrap()),
            (vec![0, 1], crate::gates::xor_gate(4).unwrap()),
        ];
        let dev = dense_crosscheck(&s, &ops).unwrap();
        assert!(dev < 1e-14);
    }

    #[test]
    fn crosscheck_capacity_guard() {
        let s = crate::gates::resource_state(8, 5).unwrap();
        let err = dense_crosscheck(&s, &[]);
        assert!(matches!(err, Err(Error::CapacityExceeded { .. })));
    }
}
