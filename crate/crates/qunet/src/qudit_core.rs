//! Mixed-radix multi-site pure-state engine.
//!
//! A register is an ordered list of sites with dimensions `d_1..d_K`. Site 1
//! has the lowest stride: a digit tuple `(k_1, .., k_K)` maps to the flat
//! index `k = sum_i k_i * p_i` with `p_1 = 1` and `p_i = d_1 * .. * d_{i-1}`.
//! States are dense complex amplitude vectors over that index space and are
//! immutable values; every operation returns a new state.

use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::gates::{LocalOperator, OperatorKind};

/// Complex amplitude. Both components must stay finite.
pub type Amp = Complex64;

/// Digit tuple `(k_1, .., k_K)` labelling one computational basis state.
pub type DigitTuple = Vec<usize>;

/// Default cap on the total register dimension. Dense vectors only; the cap
/// protects against accidentally huge site products. Override per spec with
/// [`SiteSpec::with_max_dim`] (the CLI reads `QUNET_MAX_DIM`).
pub const DEFAULT_MAX_DIM: usize = 1 << 20;

/// Norm-squared tolerance for "this state is still normalized".
pub const NORM_TOL: f64 = 1e-9;
/// Half-width of the input renormalization window around norm 1.
pub const RENORM_WINDOW: f64 = 1e-6;
/// Norms below this cannot be renormalized at all.
pub const MIN_NORM: f64 = 1e-12;
/// Probabilities below this count as an impossible branch.
pub const ZERO_PROB: f64 = 1e-12;

/// Ordered per-site dimensions with derived strides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteSpec {
    dims: Vec<usize>,
    strides: Vec<usize>,
    total: usize,
    max_dim: usize,
}

impl SiteSpec {
    /// Build a spec with the default capacity cap. Every dimension must be
    /// at least 2.
    pub fn new(dims: &[usize]) -> Result<Self> {
        Self::with_max_dim(dims, DEFAULT_MAX_DIM)
    }

    /// Build a spec with an explicit capacity cap.
    pub fn with_max_dim(dims: &[usize], max_dim: usize) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::ConfigInvalid("site list is empty".into()));
        }
        for &d in dims {
            if d < 2 {
                return Err(Error::BadDimension { dim: d });
            }
        }
        let mut strides = Vec::with_capacity(dims.len());
        let mut total: usize = 1;
        for &d in dims {
            strides.push(total);
            total = total
                .checked_mul(d)
                .ok_or(Error::CapacityExceeded { requested: usize::MAX, max: max_dim })?;
            if total > max_dim {
                return Err(Error::CapacityExceeded { requested: total, max: max_dim });
            }
        }
        Ok(SiteSpec { dims: dims.to_vec(), strides, total, max_dim })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Strides `p_i`: `p_1 = 1`, `p_i = d_1 * .. * d_{i-1}`.
    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn num_sites(&self) -> usize {
        self.dims.len()
    }

    /// Total register dimension `D = prod d_i`.
    pub fn total_dim(&self) -> usize {
        self.total
    }

    pub fn max_dim(&self) -> usize {
        self.max_dim
    }

    /// Flat index of a digit tuple: `k = sum_i k_i * p_i`.
    pub fn encode_digits(&self, digits: &[usize]) -> Result<usize> {
        if digits.len() != self.dims.len() {
            return Err(Error::DimensionMismatch { expected: self.dims.len(), actual: digits.len() });
        }
        let mut k = 0;
        for (site, ((&digit, &dim), &stride)) in
            digits.iter().zip(&self.dims).zip(&self.strides).enumerate()
        {
            if digit >= dim {
                return Err(Error::DigitOutOfRange { site, digit, dim });
            }
            k += digit * stride;
        }
        Ok(k)
    }

    /// Digit tuple of a flat index; inverse of [`encode_digits`].
    ///
    /// [`encode_digits`]: SiteSpec::encode_digits
    pub fn decode_digits(&self, k: usize) -> Result<DigitTuple> {
        if k >= self.total {
            return Err(Error::IndexOutOfRange { index: k, dim: self.total });
        }
        let mut rest = k;
        let mut digits = Vec::with_capacity(self.dims.len());
        for &d in &self.dims {
            digits.push(rest % d);
            rest /= d;
        }
        Ok(digits)
    }

    /// Spec for the concatenated register `self ++ other` (`self` keeps the
    /// lower strides).
    pub fn concat(&self, other: &SiteSpec) -> Result<SiteSpec> {
        let mut dims = self.dims.clone();
        dims.extend_from_slice(&other.dims);
        SiteSpec::with_max_dim(&dims, self.max_dim.max(other.max_dim))
    }

    /// Spec with the listed sites removed.
    pub fn without_sites(&self, drop: &[usize]) -> Result<SiteSpec> {
        let keep: Vec<usize> = (0..self.dims.len())
            .filter(|s| !drop.contains(s))
            .map(|s| self.dims[s])
            .collect();
        SiteSpec::with_max_dim(&keep, self.max_dim)
    }
}

/// How a measurement outcome is chosen.
pub enum MeasureMode<'r> {
    /// Draw by inverse CDF from the seeded generator.
    Sample(&'r mut rand_chacha::ChaCha8Rng),
    /// Force the named outcome; error if its probability is below 1e-12.
    Branch(usize),
}

/// Normalized pure state over a mixed-radix register.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    spec: SiteSpec,
    amps: Vec<Amp>,
}

impl StateVector {
    /// Build a state from explicit amplitudes. The norm must lie within
    /// `1 +- 1e-6`; the single scalar renormalization is the only change
    /// applied to the amplitudes.
    pub fn make_state(spec: SiteSpec, amps: Vec<Amp>) -> Result<Self> {
        if amps.len() != spec.total_dim() {
            return Err(Error::DimensionMismatch { expected: spec.total_dim(), actual: amps.len() });
        }
        for a in &amps {
            if !a.re.is_finite() || !a.im.is_finite() {
                return Err(Error::NotNormalizable { norm: f64::NAN });
            }
        }
        let norm = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        if norm < MIN_NORM || (norm - 1.0).abs() > RENORM_WINDOW {
            return Err(Error::NotNormalizable { norm });
        }
        let inv = 1.0 / norm;
        let amps = amps.into_iter().map(|a| a * inv).collect();
        Ok(StateVector { spec, amps })
    }

    /// Computational basis state `|k_1 .. k_K>`.
    pub fn basis_state(spec: SiteSpec, digits: &[usize]) -> Result<Self> {
        let k = spec.encode_digits(digits)?;
        let mut amps = vec![Amp::new(0.0, 0.0); spec.total_dim()];
        amps[k] = Amp::new(1.0, 0.0);
        Ok(StateVector { spec, amps })
    }

    /// Basis state addressed by flat index.
    pub fn basis_state_flat(spec: SiteSpec, k: usize) -> Result<Self> {
        if k >= spec.total_dim() {
            return Err(Error::IndexOutOfRange { index: k, dim: spec.total_dim() });
        }
        let mut amps = vec![Amp::new(0.0, 0.0); spec.total_dim()];
        amps[k] = Amp::new(1.0, 0.0);
        Ok(StateVector { spec, amps })
    }

    /// Internal constructor for amplitudes already known to be normalized.
    pub(crate) fn from_normalized(spec: SiteSpec, amps: Vec<Amp>) -> Self {
        debug_assert!(
            (amps.iter().map(|a| a.norm_sqr()).sum::<f64>() - 1.0).abs() < NORM_TOL,
            "internal state lost normalization"
        );
        StateVector { spec, amps }
    }

    pub fn spec(&self) -> &SiteSpec {
        &self.spec
    }

    pub fn amps(&self) -> &[Amp] {
        &self.amps
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    /// Tensor product; `self` keeps the lower strides.
    pub fn tensor(&self, other: &StateVector) -> Result<StateVector> {
        let spec = self.spec.concat(&other.spec)?;
        let da = self.spec.total_dim();
        let mut amps = vec![Amp::new(0.0, 0.0); spec.total_dim()];
        for (jb, &b) in other.amps.iter().enumerate() {
            if b == Amp::new(0.0, 0.0) {
                continue;
            }
            let base = jb * da;
            for (ja, &a) in self.amps.iter().enumerate() {
                amps[base + ja] = a * b;
            }
        }
        Ok(StateVector { spec, amps })
    }

    /// `<self|other>` (conjugate on `self`).
    pub fn inner_product(&self, other: &StateVector) -> Result<Amp> {
        if self.spec.dims() != other.spec.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.spec.total_dim(),
                actual: other.spec.total_dim(),
            });
        }
        Ok(self
            .amps
            .iter()
            .zip(&other.amps)
            .map(|(a, b)| a.conj() * b)
            .sum())
    }

    /// `|<self|other>|^2`. Invariant under a global phase on either argument.
    pub fn fidelity(&self, other: &StateVector) -> Result<f64> {
        Ok(self.inner_product(other)?.norm_sqr())
    }

    /// Offsets of the subspace spanned by `sites`, plus an iterator seed for
    /// the complementary sites: returns (selected offsets, complement offsets).
    fn site_offsets(&self, sites: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
        let n = self.spec.num_sites();
        for (i, &s) in sites.iter().enumerate() {
            if s >= n {
                return Err(Error::IndexOutOfRange { index: s, dim: n });
            }
            if sites[..i].contains(&s) {
                return Err(Error::ConfigInvalid(format!("site {s} listed twice")));
            }
        }
        // Offsets within the selected sub-register, first listed site = lowest stride.
        let sel_dims: Vec<usize> = sites.iter().map(|&s| self.spec.dims()[s]).collect();
        let sel_count: usize = sel_dims.iter().product();
        let mut sel = Vec::with_capacity(sel_count);
        for idx in 0..sel_count {
            let mut rest = idx;
            let mut off = 0;
            for (&dim, &site) in sel_dims.iter().zip(sites) {
                off += (rest % dim) * self.spec.strides()[site];
                rest /= dim;
            }
            sel.push(off);
        }
        // Offsets of every assignment of the complementary sites.
        let comp_sites: Vec<usize> = (0..n).filter(|s| !sites.contains(s)).collect();
        let comp_count: usize = comp_sites.iter().map(|&s| self.spec.dims()[s]).product();
        let mut comp = Vec::with_capacity(comp_count);
        for idx in 0..comp_count {
            let mut rest = idx;
            let mut off = 0;
            for &site in &comp_sites {
                let dim = self.spec.dims()[site];
                off += (rest % dim) * self.spec.strides()[site];
                rest /= dim;
            }
            comp.push(off);
        }
        Ok((sel, comp))
    }

    /// Apply a local operator along the listed sites. The operator dimension
    /// must equal the product of the selected site dimensions (first listed
    /// site = lowest stride of matrix indices). Unitarity of the operator is
    /// checked in debug builds.
    pub fn apply_on_sites(&self, sites: &[usize], op: &LocalOperator) -> Result<StateVector> {
        let op_dim: usize = sites.iter().map(|&s| self.spec.dims()[s]).product();
        if op.dim() != op_dim {
            return Err(Error::DimensionMismatch { expected: op_dim, actual: op.dim() });
        }
        #[cfg(debug_assertions)]
        op.validate()?;
        let (sel, comp) = self.site_offsets(sites)?;
        let mut out = vec![Amp::new(0.0, 0.0); self.amps.len()];
        match op.kind() {
            OperatorKind::Monomial { target, phase } => {
                for &base in &comp {
                    for (s, &off) in sel.iter().enumerate() {
                        let a = self.amps[base + off];
                        if a != Amp::new(0.0, 0.0) {
                            out[base + sel[target[s]]] = a * phase[s];
                        }
                    }
                }
            }
            OperatorKind::Dense(matrix) => {
                let mut gathered = vec![Amp::new(0.0, 0.0); op_dim];
                for &base in &comp {
                    for (s, &off) in sel.iter().enumerate() {
                        gathered[s] = self.amps[base + off];
                    }
                    for t in 0..op_dim {
                        let row = &matrix[t * op_dim..(t + 1) * op_dim];
                        let mut acc = Amp::new(0.0, 0.0);
                        for (s, &g) in gathered.iter().enumerate() {
                            acc += row[s] * g;
                        }
                        out[base + sel[t]] = acc;
                    }
                }
            }
            OperatorKind::IndexSet(set) => {
                for &base in &comp {
                    for &s in set {
                        out[base + sel[s]] = self.amps[base + sel[s]];
                    }
                }
            }
        }
        Ok(StateVector { spec: self.spec.clone(), amps: out })
    }

    /// Projective measurement over a complete orthogonal family.
    ///
    /// Returns the outcome index, its exact probability, and the normalized
    /// post-measurement state on the full register. The family must be
    /// Hermitian, idempotent, mutually orthogonal and complete on the
    /// selected sites (checked in debug builds).
    pub fn measure_with_projectors(
        &self,
        sites: &[usize],
        projectors: &[LocalOperator],
        mode: MeasureMode,
    ) -> Result<(usize, f64, StateVector)> {
        let op_dim: usize = sites.iter().map(|&s| self.spec.dims()[s]).product();
        for p in projectors {
            if p.dim() != op_dim {
                return Err(Error::DimensionMismatch { expected: op_dim, actual: p.dim() });
            }
        }
        #[cfg(debug_assertions)]
        LocalOperator::validate_projector_family(projectors)?;

        let posts: Vec<StateVector> = projectors
            .iter()
            .map(|p| self.apply_on_sites(sites, p))
            .collect::<Result<_>>()?;
        let probs: Vec<f64> = posts.iter().map(|s| s.norm_sqr()).collect();

        let outcome = match mode {
            MeasureMode::Branch(m) => {
                if m >= projectors.len() {
                    return Err(Error::IndexOutOfRange { index: m, dim: projectors.len() });
                }
                if probs[m] < ZERO_PROB {
                    return Err(Error::ZeroProbabilityBranch { outcome: m });
                }
                m
            }
            MeasureMode::Sample(rng) => {
                let total: f64 = probs.iter().sum();
                let u: f64 = rng.gen::<f64>() * total;
                let mut acc = 0.0;
                let mut chosen = probs.len() - 1;
                for (m, &p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        chosen = m;
                        break;
                    }
                }
                chosen
            }
        };

        let p = probs[outcome];
        let inv = 1.0 / p.sqrt();
        let amps = posts[outcome].amps.iter().map(|a| a * inv).collect();
        Ok((outcome, p, StateVector { spec: self.spec.clone(), amps }))
    }

    /// Permute the sites: `order[new_position] = old_position`.
    pub fn reorder_sites(&self, order: &[usize]) -> Result<StateVector> {
        let n = self.spec.num_sites();
        if order.len() != n {
            return Err(Error::DimensionMismatch { expected: n, actual: order.len() });
        }
        let mut seen = vec![false; n];
        for &o in order {
            if o >= n || seen[o] {
                return Err(Error::ConfigInvalid("site order is not a permutation".into()));
            }
            seen[o] = true;
        }
        let new_dims: Vec<usize> = order.iter().map(|&o| self.spec.dims()[o]).collect();
        let new_spec = SiteSpec::with_max_dim(&new_dims, self.spec.max_dim())?;
        let mut amps = vec![Amp::new(0.0, 0.0); self.amps.len()];
        for (k, &a) in self.amps.iter().enumerate() {
            if a == Amp::new(0.0, 0.0) {
                continue;
            }
            let digits = self.spec.decode_digits(k)?;
            let new_digits: Vec<usize> = order.iter().map(|&o| digits[o]).collect();
            amps[new_spec.encode_digits(&new_digits)?] = a;
        }
        Ok(StateVector { spec: new_spec, amps })
    }

    /// Serialize to the text state-file format: a `dims:` line followed by
    /// one `re im` pair per amplitude in flat-index order, 17 significant
    /// digits.
    pub fn to_text(&self) -> String {
        let dims: Vec<String> = self.spec.dims().iter().map(|d| d.to_string()).collect();
        let mut out = format!("dims: {}\n", dims.join(","));
        for a in &self.amps {
            out.push_str(&format!("{:.16e} {:.16e}\n", a.re, a.im));
        }
        out
    }

    /// Parse the text state-file format.
    pub fn from_text(text: &str) -> Result<StateVector> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty state file".into()))?;
        let dims_str = header
            .strip_prefix("dims:")
            .ok_or_else(|| Error::Parse("state file must start with 'dims:'".into()))?;
        let dims: Vec<usize> = dims_str
            .split(',')
            .map(|t| t.trim().parse::<usize>().map_err(|e| Error::Parse(e.to_string())))
            .collect::<Result<_>>()?;
        let spec = SiteSpec::new(&dims)?;
        let mut amps = Vec::with_capacity(spec.total_dim());
        for line in lines {
            let mut parts = line.split_whitespace();
            let re: f64 = parts
                .next()
                .ok_or_else(|| Error::Parse("missing real part".into()))?
                .parse()
                .map_err(|e: std::num::ParseFloatError| Error::Parse(e.to_string()))?;
            let im: f64 = parts
                .next()
                .ok_or_else(|| Error::Parse("missing imaginary part".into()))?
                .parse()
                .map_err(|e: std::num::ParseFloatError| Error::Parse(e.to_string()))?;
            amps.push(Amp::new(re, im));
        }
        StateVector::make_state(spec, amps)
    }
}
