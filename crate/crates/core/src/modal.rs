//! Property algebras generated by orthogonal projector families, the atomic
//! joint state space of a factorized system, and joint Born probabilities.

use serde::{Deserialize, Serialize};

use crate::config::Tolerances;
use crate::error::{Error, Result};
use crate::hilbert::{hermitian_eig, span_projector, tensor_product_all, ComplexSquareMatrix, FactorSpace, KetVector};

/// Default cap on enumerated algebra size.
pub const DEFAULT_CLOSURE_CAP: usize = 1 << 12;

const SAME: f64 = 1e-8;

/// Per-factor labels of one joint state, first factor first.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointIndex(pub Vec<usize>);

impl JointIndex {
    pub fn labels(&self) -> &[usize] {
        &self.0
    }
}

/// Closure of `S ∪ S⊥` under meet, join and orthocomplement.
#[derive(Clone, Debug)]
pub struct FauxBooleanAlgebra {
    generators: Vec<ComplexSquareMatrix>,
    perp: Vec<ComplexSquareMatrix>,
    elements: Vec<ComplexSquareMatrix>,
    dim: usize,
}

fn commute(p: &ComplexSquareMatrix, q: &ComplexSquareMatrix) -> bool {
    (p * q).max_abs_diff(&(q * p)) < SAME
}

/// Projector onto `range(P) ∩ range(Q)`.
pub fn meet(p: &ComplexSquareMatrix, q: &ComplexSquareMatrix) -> Result<ComplexSquareMatrix> {
    if commute(p, q) {
        return Ok(p * q);
    }
    // v lies in both ranges iff ⟨v|(P+Q)|v⟩ = 2.
    let eig = hermitian_eig(&(p + q), &Tolerances { hermitian: 1e-7, ..Tolerances::default() })?;
    let common: Vec<KetVector> =
        eig.values.iter().zip(eig.vectors).filter(|(l, _)| **l > 2.0 - 1e-7).map(|(_, v)| v).collect();
    Ok(span_projector(&common, p.dim()))
}

pub fn orthocomplement(p: &ComplexSquareMatrix) -> ComplexSquareMatrix {
    &ComplexSquareMatrix::identity(p.dim()) - p
}

/// Projector onto the closed span of `range(P) ∪ range(Q)`.
pub fn join(p: &ComplexSquareMatrix, q: &ComplexSquareMatrix) -> Result<ComplexSquareMatrix> {
    if commute(p, q) {
        return Ok(&(p + q) - &(p * q));
    }
    Ok(orthocomplement(&meet(&orthocomplement(p), &orthocomplement(q))?))
}

/// `Q ≤ P` as subspaces.
pub fn contains(p: &ComplexSquareMatrix, q: &ComplexSquareMatrix) -> bool {
    (p * q).max_abs_diff(q) < SAME
}

fn check_projector(p: &ComplexSquareMatrix, tol: &Tolerances) -> Result<()> {
    let herm = p.hermitian_deviation();
    if herm > tol.projector {
        return Err(Error::NotHermitian { deviation: herm });
    }
    let idem = p.idempotency_deviation();
    if idem > tol.projector {
        return Err(Error::NotIdempotent { deviation: idem });
    }
    Ok(())
}

fn check_orthogonal_family(s: &[ComplexSquareMatrix], tol: &Tolerances) -> Result<()> {
    for (a, p) in s.iter().enumerate() {
        check_projector(p, tol)?;
        for q in &s[a + 1..] {
            let dev = (p * q).max_abs();
            if dev > tol.projector {
                return Err(Error::NonOrthogonal { deviation: dev });
            }
        }
    }
    Ok(())
}

impl FauxBooleanAlgebra {
    pub fn generators(&self) -> &[ComplexSquareMatrix] {
        &self.generators
    }

    /// The projector onto the orthocomplement of `span(S)` (absent when S
    /// already spans the space).
    pub fn perp(&self) -> &[ComplexSquareMatrix] {
        &self.perp
    }

    pub fn elements(&self) -> &[ComplexSquareMatrix] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn contains_element(&self, p: &ComplexSquareMatrix) -> bool {
        self.elements.iter().any(|e| e.max_abs_diff(p) < SAME)
    }

    /// Minimal nonzero elements.
    pub fn atoms(&self) -> Vec<&ComplexSquareMatrix> {
        let nonzero: Vec<&ComplexSquareMatrix> = self.elements.iter().filter(|e| e.max_abs() > SAME).collect();
        nonzero
            .iter()
            .copied()
            .filter(|p| !nonzero.iter().any(|q| q.max_abs_diff(p) >= SAME && contains(p, q)))
            .collect()
    }
}

/// Builds the faux-Boolean algebra generated by the orthogonal family `s`.
pub fn generate_faux_boolean(
    s: &[ComplexSquareMatrix],
    total_dim: usize,
    tol: &Tolerances,
    cap: usize,
) -> Result<FauxBooleanAlgebra> {
    if let Some(bad) = s.iter().find(|p| p.dim() != total_dim) {
        return Err(Error::DimensionMismatch { expected: total_dim, found: bad.dim() });
    }
    check_orthogonal_family(s, tol)?;
    let span = s.iter().fold(ComplexSquareMatrix::zeros(total_dim), |acc, p| &acc + p);
    let rest = orthocomplement(&span);
    let perp = if rest.max_abs() > SAME { vec![rest] } else { Vec::new() };

    let mut elements: Vec<ComplexSquareMatrix> = Vec::new();
    let push = |elements: &mut Vec<ComplexSquareMatrix>, p: ComplexSquareMatrix| -> Result<bool> {
        if elements.iter().any(|e| e.max_abs_diff(&p) < SAME) {
            return Ok(false);
        }
        if elements.len() >= cap {
            return Err(Error::ClosureCap { cap });
        }
        elements.push(p);
        Ok(true)
    };
    for p in s.iter().chain(&perp) {
        push(&mut elements, p.clone())?;
    }
    let mut frontier = 0;
    while frontier < elements.len() {
        let end = elements.len();
        for a in frontier..end {
            let comp = orthocomplement(&elements[a]);
            push(&mut elements, comp)?;
            for b in 0..=a {
                let m = meet(&elements[a], &elements[b])?;
                push(&mut elements, m)?;
                let j = join(&elements[a], &elements[b])?;
                push(&mut elements, j)?;
            }
        }
        frontier = end;
    }
    Ok(FauxBooleanAlgebra { generators: s.to_vec(), perp, elements, dim: total_dim })
}

/// Every combination of one projector per factor, with its product
/// projector, in row-major order (first factor most significant).
pub fn composite_generating_set(per_factor: &[Vec<ComplexSquareMatrix>]) -> Vec<(JointIndex, ComplexSquareMatrix)> {
    let dims: Vec<usize> = per_factor.iter().map(Vec::len).collect();
    joint_indices(&dims)
        .into_iter()
        .map(|idx| {
            let parts: Vec<&ComplexSquareMatrix> = idx.0.iter().zip(per_factor).map(|(&l, s)| &s[l]).collect();
            let proj = tensor_product_all(&parts);
            (idx, proj)
        })
        .collect()
}

/// All joint indices for the given per-factor label counts, row-major.
pub fn joint_indices(label_counts: &[usize]) -> Vec<JointIndex> {
    let total: usize = label_counts.iter().product();
    let space = FactorSpace::new(label_counts.to_vec());
    match space {
        Ok(space) => (0..total).map(|flat| JointIndex(space.split_index(flat))).collect(),
        Err(_) => Vec::new(),
    }
}

/// `⟨ψ|P|ψ⟩` for a joint product projector, clamped to `[0, 1]`.
pub fn joint_probability(psi: &KetVector, joint: &ComplexSquareMatrix, tol: &Tolerances) -> Result<f64> {
    if psi.dim() != joint.dim() {
        return Err(Error::DimensionMismatch { expected: joint.dim(), found: psi.dim() });
    }
    let norm = psi.norm();
    if (norm - 1.0).abs() > tol.normalization {
        return Err(Error::NotNormalized { norm });
    }
    Ok(joint.expectation(psi).re.clamp(0.0, 1.0))
}

/// Joint probabilities for rank-1 factor labels given by vectors:
/// `|⟨v_α ⊗ … ⊗ v_ω|ψ⟩|²` over all joint indices, row-major.
pub fn joint_probabilities_rank1(psi: &KetVector, per_factor: &[Vec<KetVector>]) -> Vec<f64> {
    let dims: Vec<usize> = per_factor.iter().map(Vec::len).collect();
    joint_indices(&dims)
        .iter()
        .map(|idx| {
            let v = idx
                .0
                .iter()
                .zip(per_factor)
                .map(|(&l, s)| s[l].clone())
                .reduce(|a, b| a.tensor(&b))
                .expect("at least one factor");
            v.dot(psi).norm_sqr().clamp(0.0, 1.0)
        })
        .collect()
}

/// A two-valued property assignment concentrated on one atom.
#[derive(Clone, Debug)]
pub struct PropertyState<'a> {
    algebra: &'a FauxBooleanAlgebra,
    atom: ComplexSquareMatrix,
}

impl<'a> PropertyState<'a> {
    pub fn atom(&self) -> &ComplexSquareMatrix {
        &self.atom
    }

    pub fn algebra(&self) -> &FauxBooleanAlgebra {
        self.algebra
    }

    /// `m(P)`: 1 when the atom lies inside `P`, else 0.
    pub fn value(&self, p: &ComplexSquareMatrix) -> u8 {
        u8::from(contains(p, &self.atom))
    }
}

pub fn ultrafilter_state<'a>(algebra: &'a FauxBooleanAlgebra, atom: &ComplexSquareMatrix) -> Result<PropertyState<'a>> {
    if !algebra.atoms().iter().any(|a| a.max_abs_diff(atom) < SAME) {
        return Err(Error::NotAnAtom);
    }
    Ok(PropertyState { algebra, atom: atom.clone() })
}

/// One row of the joint state space export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointStateRecord {
    pub joint_index: usize,
    pub factor_labels: Vec<usize>,
    pub probability: f64,
}

pub fn joint_state_records(label_counts: &[usize], probabilities: &[f64]) -> Vec<JointStateRecord> {
    joint_indices(label_counts)
        .into_iter()
        .zip(probabilities)
        .enumerate()
        .map(|(k, (idx, &p))| JointStateRecord { joint_index: k, factor_labels: idx.0, probability: p })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{ops, C64, ONE, ZERO};

    fn tol() -> Tolerances {
        Tolerances::default()
    }

    fn singlet() -> KetVector {
        let s = 1.0 / 2f64.sqrt();
        KetVector::new(vec![ZERO, C64::new(s, 0.0), C64::new(-s, 0.0), ZERO]).unwrap()
    }

    #[test]
    fn identity_generates_trivial_algebra() {
        let alg = generate_faux_boolean(&[ComplexSquareMatrix::identity(3)], 3, &tol(), DEFAULT_CLOSURE_CAP).unwrap();
        assert_eq!(alg.len(), 2);
        assert!(alg.contains_element(&ComplexSquareMatrix::zeros(3)));
        assert!(alg.perp().is_empty());
    }

    #[test]
    fn complete_pair_gives_four_elements() {
        let s = [ops::basis_projector(2, 0), ops::basis_projector(2, 1)];
        let alg = generate_faux_boolean(&s, 2, &tol(), DEFAULT_CLOSURE_CAP).unwrap();
        assert_eq!(alg.len(), 4);
        assert_eq!(alg.atoms().len(), 2);
    }

    #[test]
    fn closure_matches_subset_sums() {
        // With generators S ∪ S⊥ all commuting, the closure is the set of
        // sums over subsets of the generators.
        let v = KetVector::new(vec![ONE, C64::new(0.0, 1.0), ONE]).unwrap().renormalized();
        let p = ComplexSquareMatrix::outer(&v);
        let alg = generate_faux_boolean(&[p.clone()], 3, &tol(), DEFAULT_CLOSURE_CAP).unwrap();
        let gens = [p.clone(), orthocomplement(&p)];
        let mut expected = Vec::new();
        for mask in 0..4u32 {
            let sum = (0..2)
                .filter(|b| mask >> b & 1 == 1)
                .fold(ComplexSquareMatrix::zeros(3), |acc, b| &acc + &gens[b]);
            expected.push(sum);
        }
        assert_eq!(alg.len(), expected.len());
        for e in &expected {
            assert!(alg.contains_element(e));
        }
        assert!(alg.contains_element(&p));
        assert_eq!(alg.perp().len(), 1);
    }

    #[test]
    fn closure_cap_enforced() {
        let s: Vec<_> = (0..4).map(|k| ops::basis_projector(4, k)).collect();
        assert_eq!(generate_faux_boolean(&s, 4, &tol(), 16).unwrap().len(), 16);
        assert!(matches!(generate_faux_boolean(&s, 4, &tol(), 10), Err(Error::ClosureCap { cap: 10 })));
    }

    #[test]
    fn non_orthogonal_generators_rejected() {
        let v = KetVector::new(vec![ONE, ONE]).unwrap().renormalized();
        let s = [ops::basis_projector(2, 0), ComplexSquareMatrix::outer(&v)];
        assert!(matches!(generate_faux_boolean(&s, 2, &tol(), 64), Err(Error::NonOrthogonal { .. })));
    }

    #[test]
    fn meet_and_join_of_noncommuting_planes() {
        // Two planes in C³ meeting along e₂.
        let a = &ops::basis_projector(3, 0) + &ops::basis_projector(3, 1);
        let w = KetVector::new(vec![ONE, ZERO, ONE]).unwrap().renormalized();
        let b = &ops::basis_projector(3, 1) + &ComplexSquareMatrix::outer(&w);
        let m = meet(&a, &b).unwrap();
        assert!(m.max_abs_diff(&ops::basis_projector(3, 1)) < 1e-10);
        let j = join(&a, &b).unwrap();
        assert!(j.max_abs_diff(&ComplexSquareMatrix::identity(3)) < 1e-10);
    }

    #[test]
    fn composite_sets_have_product_cardinality() {
        let f2: Vec<_> = (0..2).map(|k| ops::basis_projector(2, k)).collect();
        let f3: Vec<_> = (0..3).map(|k| ops::basis_projector(3, k)).collect();
        assert_eq!(composite_generating_set(&[f2.clone(), f2.clone()]).len(), 4);
        let set = composite_generating_set(&[f2.clone(), f2.clone(), f3]);
        assert_eq!(set.len(), 12);
        assert_eq!(set[5].0, JointIndex(vec![0, 1, 2]));
    }

    #[test]
    fn singlet_joint_probabilities() {
        let f2: Vec<_> = (0..2).map(|k| ops::basis_projector(2, k)).collect();
        let set = composite_generating_set(&[f2.clone(), f2]);
        let psi = singlet();
        let probs: Vec<f64> = set.iter().map(|(_, p)| joint_probability(&psi, p, &tol()).unwrap()).collect();
        // (up, up) stays in the state space with probability zero.
        assert_eq!(set[0].0, JointIndex(vec![0, 0]));
        assert!(probs[0].abs() < 1e-15);
        // Hand evaluation: |⟨01|ψ⟩|² = (1/√2)².
        assert!((probs[1] - 0.5).abs() < 1e-12);
        assert!((probs[2] - 0.5).abs() < 1e-12);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-10);

        let basis: Vec<KetVector> = (0..2).map(|k| KetVector::basis(2, k)).collect();
        let rank1 = joint_probabilities_rank1(&psi, &[basis.clone(), basis]);
        for (a, b) in rank1.iter().zip(&probs) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn product_state_has_unit_probability() {
        let a = KetVector::new(vec![C64::new(0.6, 0.0), C64::new(0.0, 0.8)]).unwrap();
        let b = KetVector::basis(3, 2);
        let psi = a.tensor(&b);
        let joint = crate::hilbert::tensor_product(&ComplexSquareMatrix::outer(&a), &ComplexSquareMatrix::outer(&b));
        assert!((joint_probability(&psi, &joint, &tol()).unwrap() - 1.0).abs() < 1e-12);
        let wrong = ComplexSquareMatrix::identity(2);
        assert!(matches!(joint_probability(&psi, &wrong, &tol()), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn ultrafilter_membership() {
        let p1 = ops::basis_projector(3, 0);
        let p2 = ops::basis_projector(3, 1);
        let alg = generate_faux_boolean(&[p1.clone(), p2.clone()], 3, &tol(), 64).unwrap();
        let m = ultrafilter_state(&alg, &p1).unwrap();
        assert_eq!(m.value(&p1), 1);
        assert_eq!(m.value(&orthocomplement(&p1)), 0);
        assert_eq!(m.value(&join(&p1, &p2).unwrap()), 1);
        let generating_atoms = alg.atoms().iter().filter(|a| m.value(a) == 1).count();
        assert_eq!(generating_atoms, 1);
        assert!(matches!(ultrafilter_state(&alg, &join(&p1, &p2).unwrap()), Err(Error::NotAnAtom)));
    }

    #[test]
    fn joint_state_records_enumerate_labels() {
        let recs = joint_state_records(&[2, 2], &[0.0, 0.5, 0.5, 0.0]);
        assert_eq!(recs.len(), 4);
        assert_eq!(recs[2].factor_labels, vec![1, 0]);
        let json = serde_json::to_string(&recs[1]).unwrap();
        assert_eq!(json, r#"{"joint_index":1,"factor_labels":[0,1],"probability":0.5}"#);
    }
}
