//! Identity and certificate fixtures behind the `oracle` command.

use std::fmt::Write;

use eflow_core::rng::seeded;
use eflow_core::theory::{
    lemma1_check, random_probes, theorem1_certify, CertGrid, Certificate, EulerSurrogate, Exponential, FixedPointFlow,
    Offset, QuadraticPerturbed, RandomPolynomial, SolutionMap, StraightLine,
};
use eflow_core::Result;

pub const RANDOM_MAPS: usize = 1000;
pub const PROBES_PER_MAP: usize = 4;
pub const DELTAS: [f64; 3] = [0.25, 0.5, 1.0];
pub const KS: [usize; 4] = [1, 2, 4, 8];
/// Allowed deviation of the quadratic-term ratio from 1/2 when K doubles.
pub const HALVING_TOL: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityRow {
    pub fixture: String,
    pub maps: usize,
    pub max_gap: f64,
    pub max_boundary: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub identities: Vec<IdentityRow>,
    pub certificates: Vec<Certificate>,
    /// `(Δ, K)` of each doubling whose quadratic-term ratio left `1/2 ± 1%`.
    pub halving_failures: Vec<(f64, usize)>,
}

impl OracleReport {
    pub fn pass(&self) -> bool {
        self.identities.iter().all(|r| r.pass) && self.certificates.iter().all(|c| c.pass) && self.halving_failures.is_empty()
    }

    pub fn failures(&self) -> Vec<String> {
        let mut out: Vec<String> = self.identities.iter().filter(|r| !r.pass).map(|r| r.fixture.clone()).collect();
        out.extend(self.certificates.iter().filter(|c| !c.pass).map(|c| format!("certificate(delta={},K={})", c.delta, c.k)));
        out.extend(self.halving_failures.iter().map(|(d, k)| format!("halving(delta={d},K={k})")));
        out
    }

    pub fn render(&self) -> String {
        let mut s = String::from("section,fixture,maps,max_gap,max_boundary,pass\n");
        for r in &self.identities {
            let _ = writeln!(s, "identity,{},{},{:e},{:e},{}", r.fixture, r.maps, r.max_gap, r.max_boundary, r.pass);
        }
        s.push_str("\nsection,delta,K,h,eps,L,A,B,lhs,rhs,quadratic_term,pass\n");
        for c in &self.certificates {
            let _ = writeln!(
                s,
                "certificate,{},{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{}",
                c.delta, c.k, c.h, c.eps, c.lipschitz, c.a, c.b, c.lhs, c.rhs, c.quadratic_term, c.pass
            );
        }
        s
    }
}

fn single(g: &impl SolutionMap, dim: usize, seed: u64) -> Result<IdentityRow> {
    let probes = random_probes(200, dim, 4, &mut seeded(seed));
    let r = lemma1_check(g, &probes)?;
    Ok(IdentityRow { fixture: g.name(), maps: 1, max_gap: r.max_identity_gap, max_boundary: r.max_boundary_violation, pass: r.pass })
}

/// Identity check over the random polynomial family.
pub fn random_family(maps: usize, seed: u64) -> Result<IdentityRow> {
    let mut rng = seeded(seed);
    let mut row = IdentityRow { fixture: format!("random_polynomial x{maps}"), maps, max_gap: 0.0, max_boundary: 0.0, pass: true };
    for _ in 0..maps {
        let g = RandomPolynomial::new(3, &mut rng);
        let r = lemma1_check(&g, &random_probes(PROBES_PER_MAP, 3, 5, &mut rng))?;
        row.max_gap = row.max_gap.max(r.max_identity_gap);
        row.max_boundary = row.max_boundary.max(r.max_boundary_violation);
        row.pass &= r.pass;
    }
    Ok(row)
}

/// Exponential flow against one-step Euler over the `(Δ, K)` grid.
pub fn certificates() -> Result<(Vec<Certificate>, Vec<(f64, usize)>)> {
    let grid = CertGrid::standard();
    let (exact, hat) = (Exponential { a: 1.0 }, EulerSurrogate { a: 1.0, substeps: 1 });
    let mut certs = Vec::new();
    let mut halving = Vec::new();
    for delta in DELTAS {
        let mut prev: Option<f64> = None;
        for k in KS {
            let c = theorem1_certify(&exact, &hat, delta, k, &grid)?;
            if let Some(p) = prev {
                if ((c.quadratic_term / p) - 0.5).abs() > 0.5 * HALVING_TOL {
                    halving.push((delta, k));
                }
            }
            prev = Some(c.quadratic_term);
            certs.push(c);
        }
    }
    Ok((certs, halving))
}

/// Runs every fixture; `corrupt` adds a map that violates the boundary condition.
pub fn run(corrupt: bool) -> Result<OracleReport> {
    let mut identities = vec![
        random_family(RANDOM_MAPS, 1)?,
        single(&StraightLine { v: vec![0.7, -1.3] }, 2, 2)?,
        single(&Exponential { a: 1.0 }, 2, 3)?,
        single(&EulerSurrogate { a: 1.0, substeps: 3 }, 2, 4)?,
        single(&QuadraticPerturbed { v: vec![0.4, 0.1], eta: 0.3 }, 2, 5)?,
        single(&FixedPointFlow { x0: vec![1.0, -2.0] }, 2, 6)?,
    ];
    if corrupt {
        identities.push(single(&Offset { inner: StraightLine { v: vec![1.0, 1.0] }, offset: 1e-6 }, 2, 7)?);
    }
    let (certificates, halving_failures) = certificates()?;
    Ok(OracleReport { identities, certificates, halving_failures })
}
