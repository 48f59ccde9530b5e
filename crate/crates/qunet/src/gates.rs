//! The protocol operator zoo: root-of-unity phases, modular shift and phase
//! gates, the generalized Bell basis and measurement, spread operators,
//! outcome-conditioned corrections, digit projector families, and the XOR
//! entangler.
//!
//! Phase exponents are computed as integers reduced modulo the dimension
//! before any trigonometry, so repeated composition never drifts.
//!
//! Spread and correction operators are displayed in the protocols only on the
//! states reachable at their step. They are completed to full unitaries
//! through the digit factorization: the register dimension `d` is viewed as a
//! mixed-radix space of digits `(k_1, .., k_N)` and the displayed action
//! extends as a digit-local Fourier transform or monomial map. The sign
//! conventions that the sources leave ambiguous are pinned operationally by
//! [`crate::oracle::pin_phases`]: the committed [`PhaseConvention::pinned`]
//! constants are the unique choice under which every measurement branch of
//! every protocol reconstructs the encoded state exactly.

use num_complex::Complex64;
use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::qudit_core::{Amp, SiteSpec, StateVector};

/// Tolerance for the dense unitarity check `max|U†U - I|`.
pub const UNITARY_TOL: f64 = 1e-10;
/// Tolerance for projector family completeness and orthogonality.
pub const PROJECTOR_TOL: f64 = 1e-10;

/// Result pair `(m, n)` of a generalized Bell measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BellOutcome {
    pub m: usize,
    pub n: usize,
}

impl BellOutcome {
    /// Flat index in `(m, n)` lexicographic order.
    pub fn flat(&self, d: usize) -> usize {
        self.m * d + self.n
    }

    pub fn from_flat(d: usize, index: usize) -> Self {
        BellOutcome { m: index / d, n: index % d }
    }
}

/// Internal representation of a local operator.
#[derive(Debug, Clone, PartialEq)]
pub enum OperatorKind {
    /// Row-major `dim x dim` matrix.
    Dense(Vec<Amp>),
    /// Permutation with a phase per source index: `U|s> = phase[s] |target[s]>`.
    Monomial { target: Vec<usize>, phase: Vec<Amp> },
    /// Diagonal 0/1 projector given by its basis index set (sorted).
    IndexSet(Vec<usize>),
}

/// Operator on one or more named sites, either a unitary or a projector.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOperator {
    dim: usize,
    projector: bool,
    kind: OperatorKind,
}

impl LocalOperator {
    pub fn dense_unitary(dim: usize, matrix: Vec<Amp>) -> Self {
        assert_eq!(matrix.len(), dim * dim);
        LocalOperator { dim, projector: false, kind: OperatorKind::Dense(matrix) }
    }

    pub fn dense_projector(dim: usize, matrix: Vec<Amp>) -> Self {
        assert_eq!(matrix.len(), dim * dim);
        LocalOperator { dim, projector: true, kind: OperatorKind::Dense(matrix) }
    }

    /// Monomial unitary from a target permutation and integer phase
    /// exponents: `U|s> = omega_modulus^{exponent[s]} |target[s]>`.
    pub fn monomial(dim: usize, target: Vec<usize>, exponents: &[i64], modulus: usize) -> Self {
        assert_eq!(target.len(), dim);
        assert_eq!(exponents.len(), dim);
        let phase: Vec<Amp> = exponents.iter().map(|&e| root_of_unity(modulus, e)).collect();
        LocalOperator { dim, projector: false, kind: OperatorKind::Monomial { target, phase } }
    }

    /// Projector onto the span of the listed basis indices.
    pub fn index_set_projector(dim: usize, mut set: Vec<usize>) -> Self {
        set.sort_unstable();
        set.dedup();
        assert!(set.iter().all(|&s| s < dim));
        LocalOperator { dim, projector: true, kind: OperatorKind::IndexSet(set) }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &OperatorKind {
        &self.kind
    }

    pub fn is_projector(&self) -> bool {
        self.projector
    }

    /// Fully materialized row-major matrix.
    pub fn to_dense(&self) -> Vec<Amp> {
        let d = self.dim;
        match &self.kind {
            OperatorKind::Dense(m) => m.clone(),
            OperatorKind::Monomial { target, phase } => {
                let mut m = vec![Amp::new(0.0, 0.0); d * d];
                for s in 0..d {
                    m[target[s] * d + s] = phase[s];
                }
                m
            }
            OperatorKind::IndexSet(set) => {
                let mut m = vec![Amp::new(0.0, 0.0); d * d];
                for &s in set {
                    m[s * d + s] = Amp::new(1.0, 0.0);
                }
                m
            }
        }
    }

    /// Max elementwise deviation of `U†U` from the identity.
    pub fn unitarity_deviation(&self) -> f64 {
        let d = self.dim;
        let m = self.to_dense();
        let mut max = 0.0_f64;
        for i in 0..d {
            for j in 0..d {
                let mut acc = Amp::new(0.0, 0.0);
                for k in 0..d {
                    acc += m[k * d + i].conj() * m[k * d + j];
                }
                let want = if i == j { 1.0 } else { 0.0 };
                max = max.max((acc - Amp::new(want, 0.0)).norm());
            }
        }
        max
    }

    /// Check the declared invariant: unitary within 1e-10, or Hermitian
    /// idempotent within 1e-10 when flagged as a projector.
    pub fn validate(&self) -> Result<()> {
        if self.projector {
            let d = self.dim;
            let m = self.to_dense();
            let mut max = 0.0_f64;
            for i in 0..d {
                for j in 0..d {
                    let herm = (m[i * d + j] - m[j * d + i].conj()).norm();
                    let mut sq = Amp::new(0.0, 0.0);
                    for k in 0..d {
                        sq += m[i * d + k] * m[k * d + j];
                    }
                    let idem = (sq - m[i * d + j]).norm();
                    max = max.max(herm).max(idem);
                }
            }
            if max > PROJECTOR_TOL {
                return Err(Error::IncompleteProjectorFamily { deviation: max });
            }
        } else {
            let dev = self.unitarity_deviation();
            if dev > UNITARY_TOL {
                return Err(Error::NonUnitary { deviation: dev });
            }
        }
        Ok(())
    }

    /// Check that a family of projectors is mutually orthogonal and sums to
    /// the identity within 1e-10.
    pub fn validate_projector_family(projectors: &[LocalOperator]) -> Result<()> {
        if projectors.is_empty() {
            return Err(Error::IncompleteProjectorFamily { deviation: f64::INFINITY });
        }
        let d = projectors[0].dim;
        for p in projectors {
            p.validate()?;
        }
        let mut sum = vec![Amp::new(0.0, 0.0); d * d];
        for p in projectors {
            for (acc, v) in sum.iter_mut().zip(p.to_dense()) {
                *acc += v;
            }
        }
        let mut max = 0.0_f64;
        for i in 0..d {
            for j in 0..d {
                let want = if i == j { 1.0 } else { 0.0 };
                max = max.max((sum[i * d + j] - Amp::new(want, 0.0)).norm());
            }
        }
        for (a, pa) in projectors.iter().enumerate() {
            let ma = pa.to_dense();
            for pb in &projectors[a + 1..] {
                let mb = pb.to_dense();
                for i in 0..d {
                    for j in 0..d {
                        let mut acc = Amp::new(0.0, 0.0);
                        for k in 0..d {
                            acc += ma[i * d + k] * mb[k * d + j];
                        }
                        max = max.max(acc.norm());
                    }
                }
            }
        }
        if max > PROJECTOR_TOL {
            return Err(Error::IncompleteProjectorFamily { deviation: max });
        }
        Ok(())
    }
}

fn root_of_unity(modulus: usize, exponent: i64) -> Amp {
    let m = modulus as i64;
    let e = exponent.rem_euclid(m);
    if e == 0 {
        return Amp::new(1.0, 0.0);
    }
    let angle = TAU * e as f64 / m as f64;
    Complex64::new(angle.cos(), angle.sin())
}

/// `omega(d, e) = exp(2 pi i e / d)`, with the exponent reduced mod `d`.
pub fn omega(d: usize, e: i64) -> Result<Amp> {
    if d < 2 {
        return Err(Error::BadDimension { dim: d });
    }
    Ok(root_of_unity(d, e))
}

pub fn identity(d: usize) -> LocalOperator {
    LocalOperator::monomial(d, (0..d).collect(), &vec![0; d], d.max(2))
}

/// Modular shift `|l> -> |l + m mod d>`.
pub fn mod_add_gate(d: usize, m: usize) -> Result<LocalOperator> {
    if d < 2 {
        return Err(Error::BadDimension { dim: d });
    }
    let target: Vec<usize> = (0..d).map(|l| (l + m) % d).collect();
    Ok(LocalOperator::monomial(d, target, &vec![0; d], d))
}

/// Diagonal phase `|l> -> omega^{n l} |l>`.
pub fn phase_gate(d: usize, n: usize) -> Result<LocalOperator> {
    if d < 2 {
        return Err(Error::BadDimension { dim: d });
    }
    let exps: Vec<i64> = (0..d).map(|l| (n as i64) * (l as i64)).collect();
    Ok(LocalOperator::monomial(d, (0..d).collect(), &exps, d))
}

/// Generalized Bell state `(1/sqrt d) sum_l omega^{n l} |l>|l + m>` on two
/// `d`-level sites (first site = lower stride).
pub fn bell_state(d: usize, outcome: BellOutcome) -> Result<StateVector> {
    if d < 2 {
        return Err(Error::BadDimension { dim: d });
    }
    if outcome.m >= d || outcome.n >= d {
        return Err(Error::BadOutcome { m: outcome.m, n: outcome.n, dim: d });
    }
    let spec = SiteSpec::new(&[d, d])?;
    let mut amps = vec![Amp::new(0.0, 0.0); d * d];
    let scale = 1.0 / (d as f64).sqrt();
    for l in 0..d {
        let idx = l + d * ((l + outcome.m) % d);
        amps[idx] = root_of_unity(d, (outcome.n * l) as i64) * scale;
    }
    Ok(StateVector::from_normalized(spec, amps))
}

/// The `d^2` rank-one Bell projectors in `(m, n)` lexicographic order.
pub fn bell_projectors(d: usize) -> Result<Vec<LocalOperator>> {
    let mut projs = Vec::with_capacity(d * d);
    for m in 0..d {
        for n in 0..d {
            let psi = bell_state(d, BellOutcome { m, n })?;
            let dd = d * d;
            let mut mat = vec![Amp::new(0.0, 0.0); dd * dd];
            for i in 0..dd {
                for j in 0..dd {
                    mat[i * dd + j] = psi.amps()[i] * psi.amps()[j].conj();
                }
            }
            projs.push(LocalOperator::dense_projector(dd, mat));
        }
    }
    Ok(projs)
}

/// Measure two equal-dimension sites in the generalized Bell basis.
///
/// Delegates to [`StateVector::measure_with_projectors`] over the `d^2`
/// rank-one Bell projectors; the post-state keeps the measured sites
/// collapsed in place.
pub fn bell_measure(
    state: &StateVector,
    site_a: usize,
    site_b: usize,
    mode: crate::qudit_core::MeasureMode,
) -> Result<(BellOutcome, f64, StateVector)> {
    let d = state.spec().dims()[site_a];
    if state.spec().dims()[site_b] != d {
        return Err(Error::DimensionMismatch { expected: d, actual: state.spec().dims()[site_b] });
    }
    let projs = bell_projectors(d)?;
    let (flat, p, post) = state.measure_with_projectors(&[site_a, site_b], &projs, mode)?;
    Ok((BellOutcome::from_flat(d, flat), p, post))
}

/// All Bell branches of measuring `(site_a, site_b)`, with the measured
/// sites removed from the returned states. Branch amplitudes are the partial
/// inner products `<psi_mn | state>`; zero-probability branches are skipped.
pub fn bell_project_reduced(
    state: &StateVector,
    site_a: usize,
    site_b: usize,
) -> Result<Vec<(BellOutcome, f64, StateVector)>> {
    let d = state.spec().dims()[site_a];
    if state.spec().dims()[site_b] != d {
        return Err(Error::DimensionMismatch { expected: d, actual: state.spec().dims()[site_b] });
    }
    let spec = state.spec();
    let reduced_spec = spec.without_sites(&[site_a, site_b])?;
    let stride_a = spec.strides()[site_a];
    let stride_b = spec.strides()[site_b];

    // Offsets of every assignment of the untouched sites.
    let comp_sites: Vec<usize> =
        (0..spec.num_sites()).filter(|&s| s != site_a && s != site_b).collect();
    let comp_count: usize = comp_sites.iter().map(|&s| spec.dims()[s]).product();
    let mut comp = Vec::with_capacity(comp_count);
    for idx in 0..comp_count {
        let mut rest = idx;
        let mut off = 0;
        for &site in &comp_sites {
            let dim = spec.dims()[site];
            off += (rest % dim) * spec.strides()[site];
            rest /= dim;
        }
        comp.push(off);
    }

    let scale = 1.0 / (d as f64).sqrt();
    let omegas: Vec<Amp> = (0..d).map(|e| root_of_unity(d, e as i64)).collect();
    let mut out = Vec::with_capacity(d * d);
    for m in 0..d {
        for n in 0..d {
            let mut child = vec![Amp::new(0.0, 0.0); comp_count];
            for (ci, &base) in comp.iter().enumerate() {
                let mut acc = Amp::new(0.0, 0.0);
                for l in 0..d {
                    let amp = state.amps()[base + l * stride_a + ((l + m) % d) * stride_b];
                    // conj(omega^{n l}) = omega^{-n l}
                    acc += omegas[(d - (n * l) % d) % d] * amp;
                }
                child[ci] = acc * scale;
            }
            let p: f64 = child.iter().map(|a| a.norm_sqr()).sum();
            if p < crate::qudit_core::ZERO_PROB {
                continue;
            }
            let inv = 1.0 / p.sqrt();
            for a in &mut child {
                *a *= inv;
            }
            out.push((
                BellOutcome { m, n },
                p,
                StateVector::from_normalized(reduced_spec.clone(), child),
            ));
        }
    }
    Ok(out)
}

/// Maximally entangled resource `(1/sqrt d) sum_k |k>^{(x) K}` shared by
/// `parties` sites of dimension `d`.
pub fn resource_state(d: usize, parties: usize) -> Result<StateVector> {
    if d < 2 {
        return Err(Error::BadDimension { dim: d });
    }
    if parties < 2 {
        return Err(Error::ConfigInvalid(format!("resource needs >= 2 parties, got {parties}")));
    }
    let spec = SiteSpec::new(&vec![d; parties])?;
    let mut amps = vec![Amp::new(0.0, 0.0); spec.total_dim()];
    let scale = 1.0 / (d as f64).sqrt();
    let mut stride_sum = 0usize;
    for s in 0..parties {
        stride_sum += spec.strides()[s];
    }
    for k in 0..d {
        amps[k * stride_sum] = Amp::new(scale, 0.0);
    }
    Ok(StateVector::from_normalized(spec, amps))
}

/// Sign conventions for the operator phases the protocol sources leave
/// ambiguous. [`crate::oracle::pin_phases`] certifies that exactly one
/// assignment reconstructs every branch; [`PhaseConvention::pinned`] is that
/// assignment, committed as constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseConvention {
    /// Sign of the `n`-dependent exponent in the Bell-outcome correction.
    pub bell_phase_sign: i8,
    /// Whether the Bell-outcome correction shifts by `-m` (true) or `+m`.
    pub bell_shift_subtracts: bool,
    /// Sign of the exponent in the peer-outcome phase correction.
    pub peer_phase_sign: i8,
    /// Whether the peer phase uses the peer's reported outcome (true) or the
    /// receiver's own projector outcome.
    pub peer_uses_reported: bool,
}

impl PhaseConvention {
    /// The committed convention; see [`crate::oracle::pin_phases`] for the
    /// procedure that derives and re-certifies it.
    pub const fn pinned() -> Self {
        PhaseConvention {
            bell_phase_sign: 1,
            bell_shift_subtracts: true,
            peer_phase_sign: -1,
            peer_uses_reported: true,
        }
    }

    /// All candidate assignments enumerated by the pinning procedure.
    pub fn candidates() -> Vec<PhaseConvention> {
        let mut out = Vec::new();
        for &bell_phase_sign in &[1i8, -1] {
            for &bell_shift_subtracts in &[true, false] {
                for &peer_phase_sign in &[1i8, -1] {
                    for &peer_uses_reported in &[true, false] {
                        out.push(PhaseConvention {
                            bell_phase_sign,
                            bell_shift_subtracts,
                            peer_phase_sign,
                            peer_uses_reported,
                        });
                    }
                }
            }
        }
        out
    }
}

impl Default for PhaseConvention {
    fn default() -> Self {
        Self::pinned()
    }
}

/// Digit-local Fourier transform on every digit except `keep` (1-based),
/// identity on digit `keep`. Entry: `prod_{j != keep} omega_{d_j}^{s_j t_j} /
/// sqrt(d_j)`. This is the canonical unitary completion of both the sender
/// and receiver spread operations: on a sender's support (other digits zero)
/// it produces the uniform unphased superposition, and on a receiver's
/// support it produces the displayed digit phases.
fn digit_fourier_except(factors: &SiteSpec, keep: usize) -> LocalOperator {
    let d = factors.total_dim();
    let n = factors.num_sites();
    let mut mat = vec![Amp::new(0.0, 0.0); d * d];
    let norm: f64 = (0..n)
        .filter(|&j| j + 1 != keep)
        .map(|j| 1.0 / (factors.dims()[j] as f64).sqrt())
        .product();
    for s in 0..d {
        let sd = factors.decode_digits(s).expect("in range");
        for t in 0..d {
            let td = factors.decode_digits(t).expect("in range");
            if sd[keep - 1] != td[keep - 1] {
                continue;
            }
            // Accumulated exponent as a multiple of 1/d turns of the circle:
            // omega_{d_j}^{s t} = omega_d^{(d / d_j) s t}.
            let mut exp: i64 = 0;
            for j in 0..n {
                if j + 1 == keep {
                    continue;
                }
                let dj = factors.dims()[j] as i64;
                let contrib = ((sd[j] as i64 * td[j] as i64) % dj) * (d as i64 / dj);
                exp = (exp + contrib) % d as i64;
            }
            mat[t * d + s] = root_of_unity(d, exp) * norm;
        }
    }
    LocalOperator::dense_unitary(d, mat)
}

/// Sender `i`'s spread: maps the embedded basis ket `|k_i p_i>` to the
/// uniform superposition over the complementary digits, amplitude
/// `1/sqrt(d/d_i)` per term. Unitary on the full `d`-dimensional space.
pub fn spread_op(factors: &SiteSpec, sender: usize) -> Result<LocalOperator> {
    if sender == 0 || sender > factors.num_sites() {
        return Err(Error::BadSenderIndex { index: sender, count: factors.num_sites() });
    }
    Ok(digit_fourier_except(factors, sender))
}

/// Receiver `i`'s spread before projecting: the digit Fourier transform on
/// every digit except `i`, with the digit phases the projector outcomes key
/// on.
pub fn receiver_spread_op(factors: &SiteSpec, receiver: usize) -> Result<LocalOperator> {
    if receiver == 0 || receiver > factors.num_sites() {
        return Err(Error::BadReceiverIndex { index: receiver, count: factors.num_sites() });
    }
    Ok(digit_fourier_except(factors, receiver))
}

/// Correction applied by the party holding the phase role after a Bell
/// result `(m, n)`: shift the register label back by `m` and remove the
/// `omega^{n .}` phase left by the measurement.
pub fn alice_correction(d: usize, outcome: BellOutcome, conv: PhaseConvention) -> Result<LocalOperator> {
    if outcome.m >= d || outcome.n >= d {
        return Err(Error::BadOutcome { m: outcome.m, n: outcome.n, dim: d });
    }
    let mut target = vec![0usize; d];
    let mut exps = vec![0i64; d];
    for x in 0..d {
        let shifted = if conv.bell_shift_subtracts { (x + d - outcome.m) % d } else { (x + outcome.m) % d };
        target[x] = shifted;
        exps[x] = conv.bell_phase_sign as i64 * (outcome.n as i64) * (shifted as i64);
    }
    Ok(LocalOperator::monomial(d, target, &exps, d))
}

/// Correction applied by every other sharing party after a Bell result:
/// the bare label shift `|x + m> -> |x>`.
pub fn bob_correction(d: usize, outcome: BellOutcome) -> Result<LocalOperator> {
    if outcome.m >= d {
        return Err(Error::BadOutcome { m: outcome.m, n: outcome.n, dim: d });
    }
    mod_add_gate(d, (d - outcome.m) % d)
}

/// Receiver `i`'s projector family: outcome `o` decodes to the digit tuple
/// `(m_j)_{j != i}` over the complementary dimensions in ascending site
/// order, and projects onto `{ sum_{j != i} m_j p_j + k p_i : k < d_i }`.
pub fn receiver_projectors(factors: &SiteSpec, receiver: usize) -> Result<Vec<LocalOperator>> {
    if receiver == 0 || receiver > factors.num_sites() {
        return Err(Error::BadReceiverIndex { index: receiver, count: factors.num_sites() });
    }
    let d = factors.total_dim();
    let di = factors.dims()[receiver - 1];
    let pi = factors.strides()[receiver - 1];
    let others: Vec<usize> = (0..factors.num_sites()).filter(|&j| j + 1 != receiver).collect();
    let family_size = d / di;
    let mut projs = Vec::with_capacity(family_size);
    for o in 0..family_size {
        let digits = complement_digits(factors, receiver, o);
        let mut offset = 0usize;
        for (&j, &m) in others.iter().zip(&digits) {
            offset += m * factors.strides()[j];
        }
        let set: Vec<usize> = (0..di).map(|k| offset + k * pi).collect();
        projs.push(LocalOperator::index_set_projector(d, set));
    }
    Ok(projs)
}

/// Decode a receiver projector outcome into the complementary digit tuple
/// (ascending site order, skipping the receiver's own digit).
pub fn complement_digits(factors: &SiteSpec, receiver: usize, outcome: usize) -> Vec<usize> {
    let mut rest = outcome;
    let mut digits = Vec::new();
    for (j, &dj) in factors.dims().iter().enumerate() {
        if j + 1 == receiver {
            continue;
        }
        digits.push(rest % dj);
        rest /= dj;
    }
    digits
}

/// Inverse of [`complement_digits`].
pub fn complement_outcome(factors: &SiteSpec, receiver: usize, digits: &[usize]) -> usize {
    let mut o = 0usize;
    let mut stride = 1usize;
    let mut it = digits.iter();
    for (j, &dj) in factors.dims().iter().enumerate() {
        if j + 1 == receiver {
            continue;
        }
        o += it.next().copied().unwrap_or(0) * stride;
        stride *= dj;
    }
    o
}

/// Receiver `i`'s corrections after her projector outcome and her peers'
/// reports: first the relabelling that returns her digit support to
/// `|k_i p_i>` (completed to the modular shift by the measured offset), then
/// one digit-phase removal per peer report.
pub fn receiver_corrections(
    factors: &SiteSpec,
    receiver: usize,
    own_outcome: usize,
    peer_reports: &[(usize, usize)],
    conv: PhaseConvention,
) -> Result<Vec<LocalOperator>> {
    if receiver == 0 || receiver > factors.num_sites() {
        return Err(Error::BadReceiverIndex { index: receiver, count: factors.num_sites() });
    }
    let d = factors.total_dim();
    let di = factors.dims()[receiver - 1];
    if own_outcome >= d / di {
        return Err(Error::IndexOutOfRange { index: own_outcome, dim: d / di });
    }
    let digits = complement_digits(factors, receiver, own_outcome);
    let others: Vec<usize> = (0..factors.num_sites()).filter(|&j| j + 1 != receiver).collect();
    let mut offset = 0usize;
    for (&j, &m) in others.iter().zip(&digits) {
        offset += m * factors.strides()[j];
    }
    let mut ops = vec![mod_add_gate(d, (d - offset % d) % d)?];
    for &(peer, reported) in peer_reports {
        ops.push(peer_phase_correction(factors, receiver, peer, reported, conv)?);
    }
    Ok(ops)
}

/// Diagonal phase removing one peer's residue: `|x> -> omega_d^{sign (d/d_i)
/// digit_i(x) m} |x>` where `m` is the digit-`i` component of peer `j`'s
/// projector outcome.
pub fn peer_phase_correction(
    factors: &SiteSpec,
    receiver: usize,
    peer: usize,
    reported_digit: usize,
    conv: PhaseConvention,
) -> Result<LocalOperator> {
    if peer == 0 || peer > factors.num_sites() || peer == receiver {
        return Err(Error::BadReceiverIndex { index: peer, count: factors.num_sites() });
    }
    let d = factors.total_dim();
    let di = factors.dims()[receiver - 1] as i64;
    let unit = d as i64 / di;
    let mut exps = vec![0i64; d];
    for (x, exp) in exps.iter_mut().enumerate() {
        let ki = factors.decode_digits(x).expect("in range")[receiver - 1] as i64;
        *exp = conv.peer_phase_sign as i64 * unit * ki * reported_digit as i64;
    }
    Ok(LocalOperator::monomial(d, (0..d).collect(), &exps, d))
}

/// Two-site XOR entangler `|k>|l> -> |k>|l + k mod d>` (control = first,
/// lower-stride site).
pub fn xor_gate(d: usize) -> Result<LocalOperator> {
    if d < 2 {
        return Err(Error::BadDimension { dim: d });
    }
    let dd = d * d;
    let mut target = vec![0usize; dd];
    for k in 0..d {
        for l in 0..d {
            target[k + d * l] = k + d * ((l + k) % d);
        }
    }
    Ok(LocalOperator::monomial(dd, target, &vec![0; dd], d))
}

/// Computational-basis projectors `{|l><l|}` on one `d`-level site.
pub fn computational_projectors(d: usize) -> Vec<LocalOperator> {
    (0..d).map(|l| LocalOperator::index_set_projector(d, vec![l])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qudit_core::MeasureMode;

    fn c(re: f64, im: f64) -> Amp {
        Amp::new(re, im)
    }

    #[test]
    fn omega_values() {
        assert!((omega(2, 1).unwrap() - c(-1.0, 0.0)).norm() < 1e-15);
        assert!((omega(4, 1).unwrap() - c(0.0, 1.0)).norm() < 1e-15);
        assert!((omega(3, 3).unwrap() - c(1.0, 0.0)).norm() < 1e-15);
        assert!(matches!(omega(1, 0), Err(Error::BadDimension { dim: 1 })));
    }

    #[test]
    fn shift_and_phase_generators() {
        let spec = SiteSpec::new(&[3]).unwrap();
        let two = StateVector::basis_state(spec.clone(), &[2]).unwrap();
        let shifted = two.apply_on_sites(&[0], &mod_add_gate(3, 1).unwrap()).unwrap();
        assert_eq!(shifted.amps()[0], c(1.0, 0.0));

        let spec2 = SiteSpec::new(&[2]).unwrap();
        let one = StateVector::basis_state(spec2, &[1]).unwrap();
        let phased = one.apply_on_sites(&[0], &phase_gate(2, 1).unwrap()).unwrap();
        assert!((phased.amps()[1] - c(-1.0, 0.0)).norm() < 1e-15);

        let g = mod_add_gate(5, 2).unwrap();
        let spec5 = SiteSpec::new(&[5]).unwrap();
        let mut s = StateVector::basis_state(spec5, &[1]).unwrap();
        for _ in 0..5 {
            s = s.apply_on_sites(&[0], &g).unwrap();
        }
        assert_eq!(s.amps()[1], c(1.0, 0.0));

        let inv = mod_add_gate(3, 2).unwrap();
        let fwd = mod_add_gate(3, 1).unwrap();
        let spec3 = SiteSpec::new(&[3]).unwrap();
        for k in 0..3 {
            let s = StateVector::basis_state(spec3.clone(), &[k]).unwrap();
            let back = s.apply_on_sites(&[0], &fwd).unwrap().apply_on_sites(&[0], &inv).unwrap();
            assert_eq!(back.amps(), s.amps());
        }
    }

    #[test]
    fn bell_states_at_d2() {
        let h = 1.0 / 2.0_f64.sqrt();
        let b00 = bell_state(2, BellOutcome { m: 0, n: 0 }).unwrap();
        assert!((b00.amps()[0] - c(h, 0.0)).norm() < 1e-15);
        assert!((b00.amps()[3] - c(h, 0.0)).norm() < 1e-15);

        let b01 = bell_state(2, BellOutcome { m: 0, n: 1 }).unwrap();
        assert!((b01.amps()[0] - c(h, 0.0)).norm() < 1e-15);
        assert!((b01.amps()[3] - c(-h, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn bell_gram_matrix_d3() {
        let mut states = Vec::new();
        for m in 0..3 {
            for n in 0..3 {
                states.push(bell_state(3, BellOutcome { m, n }).unwrap());
            }
        }
        for (i, a) in states.iter().enumerate() {
            for (j, b) in states.iter().enumerate() {
                let ip = a.inner_product(b).unwrap();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((ip - c(want, 0.0)).norm() < 1e-12, "gram entry ({i},{j})");
            }
        }
    }

    #[test]
    fn bell_measure_eigenstate() {
        let psi = bell_state(3, BellOutcome { m: 2, n: 1 }).unwrap();
        let projs = bell_projectors(3).unwrap();
        let (flat, p, _) = psi
            .measure_with_projectors(&[0, 1], &projs, MeasureMode::Branch(2 * 3 + 1))
            .unwrap();
        assert_eq!(BellOutcome::from_flat(3, flat), BellOutcome { m: 2, n: 1 });
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bell_measure_orthogonal_branch_errors() {
        let spec = SiteSpec::new(&[2, 2]).unwrap();
        let s01 = StateVector::basis_state(spec, &[0, 1]).unwrap();
        let err = bell_measure(&s01, 0, 1, MeasureMode::Branch(0));
        assert!(matches!(err, Err(Error::ZeroProbabilityBranch { .. })));
    }

    #[test]
    fn bell_measure_uniform_on_resource() {
        for d in [2usize, 3, 4] {
            let pair = resource_state(d, 2).unwrap();
            let branches = bell_project_reduced(&pair, 0, 1).unwrap();
            assert_eq!(branches.len(), d * d);
            for (_, p, _) in &branches {
                assert!((p - 1.0 / (d * d) as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resource_state_amplitudes() {
        let h = 1.0 / 2.0_f64.sqrt();
        let ghz = resource_state(2, 3).unwrap();
        assert!((ghz.amps()[0] - c(h, 0.0)).norm() < 1e-15);
        assert!((ghz.amps()[7] - c(h, 0.0)).norm() < 1e-15);
        assert_eq!(ghz.amps().iter().filter(|a| a.norm() > 0.0).count(), 2);

        let ghz3 = resource_state(3, 3).unwrap();
        let nonzero: Vec<_> = ghz3.amps().iter().filter(|a| a.norm() > 0.0).collect();
        assert_eq!(nonzero.len(), 3);
        for a in nonzero {
            assert!((a.norm() - 1.0 / 3.0_f64.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn spread_on_two_qubit_factorization() {
        let factors = SiteSpec::new(&[2, 2]).unwrap();
        let op = spread_op(&factors, 1).unwrap();
        let spec = SiteSpec::new(&[4]).unwrap();
        let h = 1.0 / 2.0_f64.sqrt();

        let s0 = StateVector::basis_state(spec.clone(), &[0]).unwrap();
        let out = s0.apply_on_sites(&[0], &op).unwrap();
        assert!((out.amps()[0] - c(h, 0.0)).norm() < 1e-12);
        assert!((out.amps()[2] - c(h, 0.0)).norm() < 1e-12);

        let s1 = StateVector::basis_state(spec, &[1]).unwrap();
        let out = s1.apply_on_sites(&[0], &op).unwrap();
        assert!((out.amps()[1] - c(h, 0.0)).norm() < 1e-12);
        assert!((out.amps()[3] - c(h, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn spread_uniform_over_complementary_digits() {
        // Sender 2 of (2,3): |k2 p2> spreads over the d1 = 2 low-digit values.
        let factors = SiteSpec::new(&[2, 3]).unwrap();
        let op = spread_op(&factors, 2).unwrap();
        let spec = SiteSpec::new(&[6]).unwrap();
        let s = StateVector::basis_state(spec, &[2]).unwrap();
        let out = s.apply_on_sites(&[0], &op).unwrap();
        let h = 1.0 / 2.0_f64.sqrt();
        assert!((out.amps()[2] - c(h, 0.0)).norm() < 1e-12);
        assert!((out.amps()[3] - c(h, 0.0)).norm() < 1e-12);
        for idx in [0, 1, 4, 5] {
            assert!(out.amps()[idx].norm() < 1e-12);
        }
    }

    #[test]
    fn spread_ops_unitary() {
        for dims in [vec![2usize, 2], vec![2, 3], vec![3, 2], vec![2, 2, 2], vec![3, 4]] {
            let factors = SiteSpec::new(&dims).unwrap();
            for i in 1..=dims.len() {
                assert!(spread_op(&factors, i).unwrap().unitarity_deviation() < UNITARY_TOL);
                let r = receiver_spread_op(&factors, i).unwrap();
                assert!(r.unitarity_deviation() < UNITARY_TOL);
            }
        }
        let factors = SiteSpec::new(&[2, 2]).unwrap();
        assert!(matches!(spread_op(&factors, 0), Err(Error::BadSenderIndex { .. })));
        assert!(matches!(spread_op(&factors, 3), Err(Error::BadSenderIndex { .. })));
    }

    #[test]
    fn receiver_spread_followed_by_adjoint_is_identity() {
        let factors = SiteSpec::new(&[2, 3]).unwrap();
        let op = receiver_spread_op(&factors, 1).unwrap();
        let dense = op.to_dense();
        let d = op.dim();
        let mut adj = vec![c(0.0, 0.0); d * d];
        for i in 0..d {
            for j in 0..d {
                adj[i * d + j] = dense[j * d + i].conj();
            }
        }
        let adj_op = LocalOperator::dense_unitary(d, adj);
        let spec = SiteSpec::new(&[6]).unwrap();
        for k in 0..6 {
            let s = StateVector::basis_state(spec.clone(), &[k]).unwrap();
            let round = s.apply_on_sites(&[0], &op).unwrap().apply_on_sites(&[0], &adj_op).unwrap();
            assert!((round.fidelity(&s).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn alice_correction_trivial_and_shift_branches() {
        let conv = PhaseConvention::pinned();
        let id = alice_correction(4, BellOutcome { m: 0, n: 0 }, conv).unwrap();
        let spec = SiteSpec::new(&[4]).unwrap();
        for k in 0..4 {
            let s = StateVector::basis_state(spec.clone(), &[k]).unwrap();
            assert_eq!(s.apply_on_sites(&[0], &id).unwrap().amps(), s.amps());
        }

        let shift = alice_correction(2, BellOutcome { m: 1, n: 0 }, conv).unwrap();
        let spec2 = SiteSpec::new(&[2]).unwrap();
        let s = StateVector::basis_state(spec2, &[1]).unwrap();
        let out = s.apply_on_sites(&[0], &shift).unwrap();
        assert_eq!(out.amps()[0], c(1.0, 0.0));

        for m in 0..4 {
            for n in 0..4 {
                let op = alice_correction(4, BellOutcome { m, n }, conv).unwrap();
                assert!(op.unitarity_deviation() < UNITARY_TOL);
            }
        }
    }

    #[test]
    fn bob_correction_unitary_for_all_m() {
        for d in 2..=12 {
            for m in 0..d {
                let op = bob_correction(d, BellOutcome { m, n: 0 }).unwrap();
                assert!(op.unitarity_deviation() < UNITARY_TOL);
            }
        }
        let op = bob_correction(4, BellOutcome { m: 0, n: 0 }).unwrap();
        let spec = SiteSpec::new(&[4]).unwrap();
        let s = StateVector::basis_state(spec, &[2]).unwrap();
        assert_eq!(s.apply_on_sites(&[0], &op).unwrap().amps(), s.amps());
    }

    #[test]
    fn receiver_projector_family_shapes() {
        let factors = SiteSpec::new(&[2, 2]).unwrap();
        let projs = receiver_projectors(&factors, 1).unwrap();
        assert_eq!(projs.len(), 2);
        match projs[0].kind() {
            OperatorKind::IndexSet(set) => assert_eq!(set, &vec![0, 1]),
            _ => panic!("expected index set"),
        }
        match projs[1].kind() {
            OperatorKind::IndexSet(set) => assert_eq!(set, &vec![2, 3]),
            _ => panic!("expected index set"),
        }
        LocalOperator::validate_projector_family(&projs).unwrap();
    }

    #[test]
    fn receiver_projector_families_complete_up_to_d24() {
        for dims in [vec![2usize, 3, 4], vec![4, 6], vec![2, 12], vec![3, 8], vec![2, 2, 2, 3]] {
            let factors = SiteSpec::new(&dims).unwrap();
            for i in 1..=dims.len() {
                let projs = receiver_projectors(&factors, i).unwrap();
                assert_eq!(projs.len(), factors.total_dim() / dims[i - 1]);
                LocalOperator::validate_projector_family(&projs).unwrap();
            }
        }
    }

    #[test]
    fn receiver_corrections_shapes() {
        let factors = SiteSpec::new(&[2, 2]).unwrap();
        let conv = PhaseConvention::pinned();
        let ops = receiver_corrections(&factors, 1, 0, &[], conv).unwrap();
        assert_eq!(ops.len(), 1);
        let spec = SiteSpec::new(&[4]).unwrap();
        for k in 0..4 {
            let s = StateVector::basis_state(spec.clone(), &[k]).unwrap();
            assert_eq!(s.apply_on_sites(&[0], &ops[0]).unwrap().amps(), s.amps());
        }

        let phase = peer_phase_correction(&factors, 1, 2, 0, conv).unwrap();
        for k in 0..4 {
            let s = StateVector::basis_state(spec.clone(), &[k]).unwrap();
            assert_eq!(s.apply_on_sites(&[0], &phase).unwrap().amps(), s.amps());
        }
    }

    #[test]
    fn xor_gate_truth_tables() {
        // d = 2: CNOT.
        let spec = SiteSpec::new(&[2, 2]).unwrap();
        let xor = xor_gate(2).unwrap();
        for (k, l, want) in [(0, 0, [0, 0]), (0, 1, [0, 1]), (1, 0, [1, 1]), (1, 1, [1, 0])] {
            let s = StateVector::basis_state(spec.clone(), &[k, l]).unwrap();
            let out = s.apply_on_sites(&[0, 1], &xor).unwrap();
            let idx = spec.encode_digits(&want).unwrap();
            assert_eq!(out.amps()[idx], c(1.0, 0.0), "xor |{k}{l}>");
        }

        // d = 3: |2>|2> -> |2>|1>.
        let spec3 = SiteSpec::new(&[3, 3]).unwrap();
        let xor3 = xor_gate(3).unwrap();
        let s = StateVector::basis_state(spec3.clone(), &[2, 2]).unwrap();
        let out = s.apply_on_sites(&[0, 1], &xor3).unwrap();
        assert_eq!(out.amps()[spec3.encode_digits(&[2, 1]).unwrap()], c(1.0, 0.0));
    }

    #[test]
    fn xor_gate_order_divides_d() {
        // Matrix power check: applying the gate d times gives the identity.
        for d in 2..=6usize {
            let xor = xor_gate(d).unwrap();
            let dd = d * d;
            let m = xor.to_dense();
            let mut acc: Vec<Amp> = (0..dd * dd)
                .map(|i| if i / dd == i % dd { c(1.0, 0.0) } else { c(0.0, 0.0) })
                .collect();
            for _ in 0..d {
                let mut next = vec![c(0.0, 0.0); dd * dd];
                for i in 0..dd {
                    for j in 0..dd {
                        let mut s = c(0.0, 0.0);
                        for k in 0..dd {
                            s += m[i * dd + k] * acc[k * dd + j];
                        }
                        next[i * dd + j] = s;
                    }
                }
                acc = next;
            }
            for i in 0..dd {
                for j in 0..dd {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((acc[i * dd + j] - c(want, 0.0)).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn monomial_and_dense_forms_agree() {
        for op in [
            mod_add_gate(5, 3).unwrap(),
            phase_gate(6, 4).unwrap(),
            xor_gate(3).unwrap(),
            alice_correction(6, BellOutcome { m: 4, n: 5 }, PhaseConvention::pinned()).unwrap(),
        ] {
            let dense = LocalOperator::dense_unitary(op.dim(), op.to_dense());
            let spec = SiteSpec::new(&[op.dim()]).unwrap();
            for k in 0..op.dim() {
                let s = StateVector::basis_state(spec.clone(), &[k]).unwrap();
                let a = s.apply_on_sites(&[0], &op).unwrap();
                let b = s.apply_on_sites(&[0], &dense).unwrap();
                for (x, y) in a.amps().iter().zip(b.amps()) {
                    assert!((x - y).norm() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn resource_state_shift_invariance() {
        // Applying the same modular shift on every site permutes the
        // resource amplitudes onto themselves.
        for d in 2..=6usize {
            for k in [2usize, 3] {
                let ghz = resource_state(d, k).unwrap();
                for m in 0..d {
                    let g = mod_add_gate(d, m).unwrap();
                    let mut s = ghz.clone();
                    for site in 0..k {
                        s = s.apply_on_sites(&[site], &g).unwrap();
                    }
                    for (a, b) in s.amps().iter().zip(ghz.amps()) {
                        assert!((a - b).norm() < 1e-12);
                    }
                }
            }
        }
    }
}
