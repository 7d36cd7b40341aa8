use std::collections::BTreeSet;

use kollektiv::fine_rastall::{
    atom_values, bell_check, bell_family, joint_exists, marginal_polytope_facets, random_system,
    JointAtomVector, JointVerdict, MarginalSystem, Rational,
};
use kollektiv::Error;
use num_traits::{One, Signed, Zero};
use proptest::prelude::*;

fn r(n: i64, d: i64) -> Rational {
    Rational::new(n.into(), d.into())
}

/// Independent decision procedure via the Fourier expansion of the joint:
/// `8 p(a,b,c) = 1 + a E(A) + b E(B) + c E(A') + ab E(AB) + cb E(A'B) + ac E(AA') + abc T`.
/// With `(A, A')` supplied only `T` is free and feasibility is an interval test.
/// Without it the path `A - B - A'` always has the joint `p(a,b) p(c,b) / p(b)`.
fn oracle_feasible(m: &MarginalSystem) -> bool {
    let mo = m.moments();
    let Some(z) = mo.get(6) else {
        return true;
    };
    let mut lo: Option<Rational> = None;
    let mut hi: Option<Rational> = None;
    for i in 0..8 {
        let [a, b, c] = atom_values(i);
        let q = |v: i64| Rational::from_integer(v.into());
        let base = Rational::one()
            + q(a) * &mo[1]
            + q(b) * &mo[2]
            + q(c) * &mo[3]
            + q(a * b) * &mo[4]
            + q(c * b) * &mo[5]
            + q(a * c) * z;
        if a * b * c > 0 {
            let bound = -base;
            lo = Some(lo.map_or(bound.clone(), |l| l.max(bound)));
        } else {
            hi = Some(hi.map_or(base.clone(), |h| h.min(base)));
        }
    }
    lo.unwrap() <= hi.unwrap()
}

fn check_verdict(m: &MarginalSystem, v: &JointVerdict) {
    match v {
        JointVerdict::Feasible { witness } => {
            assert_eq!(&witness.marginals(m.a_a_prime.is_some()), m);
            assert!(witness.atoms().iter().all(|p| !p.is_negative()));
            assert_eq!(witness.atoms().iter().sum::<Rational>(), Rational::one());
        }
        JointVerdict::Infeasible { certificate } => {
            assert!(certificate.vertex_values().iter().all(|&v| v >= 0));
            assert!(certificate.evaluate(m).is_negative());
            assert_eq!(certificate.evaluate(m), certificate.value);
        }
    }
}

#[test]
fn stored_table_matches_vertex_to_facet_conversion() {
    for with_aa in [true, false] {
        let computed: BTreeSet<Vec<i64>> =
            marginal_polytope_facets(with_aa).iter().cloned().collect();
        let table: BTreeSet<Vec<i64>> = bell_family(with_aa).into_iter().map(|(_, c)| c).collect();
        assert_eq!(computed, table, "with (A, A') = {with_aa}");
    }
    assert_eq!(marginal_polytope_facets(true).len(), 16);
    assert_eq!(marginal_polytope_facets(false).len(), 8);
}

#[test]
fn random_systems_agree_with_oracle_and_bell_family() {
    let mut feasible = 0;
    let mut infeasible = 0;
    for i in 0..1000 {
        let m = random_system(2024, i);
        let v = joint_exists(&m).unwrap();
        let bell = bell_check(&m);
        let oracle = oracle_feasible(&m);
        assert_eq!(v.is_feasible(), oracle, "instance {i}: {}", m.to_json());
        assert_eq!(v.is_feasible(), bell.pass, "instance {i}");
        check_verdict(&m, &v);
        if let JointVerdict::Infeasible { certificate } = &v {
            assert!(bell
                .violated()
                .any(|q| q.coefficients == certificate.coefficients));
        }
        if v.is_feasible() {
            feasible += 1;
        } else {
            infeasible += 1;
        }
    }
    assert!(
        feasible > 100 && infeasible > 100,
        "{feasible} / {infeasible}"
    );
}

/// All compositions of `total` into 8 nonnegative parts.
fn compositions(total: i64, parts: usize, prefix: &mut Vec<i64>, out: &mut impl FnMut(&[i64])) {
    if parts == 1 {
        prefix.push(total);
        out(prefix);
        prefix.pop();
        return;
    }
    for k in 0..=total {
        prefix.push(k);
        compositions(total - k, parts - 1, prefix, out);
        prefix.pop();
    }
}

fn grid_search(m: &MarginalSystem, denominator: i64) -> bool {
    let mut found = false;
    compositions(denominator, 8, &mut Vec::new(), &mut |w| {
        if found {
            return;
        }
        let atoms = std::array::from_fn(|i| r(w[i], denominator));
        let joint = JointAtomVector::new(atoms).unwrap();
        if &joint.marginals(m.a_a_prime.is_some()) == m {
            found = true;
        }
    });
    found
}

#[test]
fn perfect_correlations_are_contradictory() {
    // p(A = B) = 1, p(A' = B) = 1, p(A = A') = 0
    let m =
        MarginalSystem::from_moments(r(0, 1), r(0, 1), r(0, 1), r(1, 1), r(1, 1), Some(r(-1, 1)))
            .unwrap();
    assert!(!grid_search(&m, 12));
    let v = joint_exists(&m).unwrap();
    assert!(!v.is_feasible());
    check_verdict(&m, &v);
    let JointVerdict::Infeasible { certificate } = v else {
        unreachable!()
    };
    assert_eq!(certificate.value, r(-2, 1));
    let bell = bell_check(&m);
    assert!(!bell.pass);
    assert!(bell
        .violated()
        .any(|q| q.coefficients == certificate.coefficients));
}

#[test]
fn product_marginals_are_found_by_grid_search() {
    let m = MarginalSystem::product_fair();
    assert!(grid_search(&m, 8));
    assert!(bell_check(&m).pass);
    assert!(bell_check(&m).inequalities.iter().all(|q| q.holds));
}

#[test]
fn inconsistent_tables_are_invalid_input() {
    let mut m = MarginalSystem::product_fair();
    m.a_prime_b[1][1] = r(1, 2);
    m.a_prime_b[1][0] = r(0, 1);
    assert!(matches!(joint_exists(&m), Err(Error::InvalidInput(_))));
    let mut neg = MarginalSystem::product_fair();
    neg.ab = [[r(1, 2), r(0, 1)], [r(0, 1), r(1, 2)]];
    neg.ab[0][0] = r(3, 4);
    neg.ab[0][1] = r(-1, 4);
    assert!(matches!(joint_exists(&neg), Err(Error::InvalidInput(_))));
}

fn atoms_strategy() -> impl Strategy<Value = JointAtomVector> {
    prop::collection::vec(0i64..20, 8)
        .prop_filter("nonzero", |w| w.iter().sum::<i64>() > 0)
        .prop_map(|w| {
            let total: i64 = w.iter().sum();
            JointAtomVector::new(std::array::from_fn(|i| r(w[i], total))).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn induced_marginals_are_feasible(joint in atoms_strategy(), with_aa in any::<bool>()) {
        let m = joint.marginals(with_aa);
        let v = joint_exists(&m).unwrap();
        prop_assert!(v.is_feasible());
        check_verdict(&m, &v);
        prop_assert!(bell_check(&m).pass);
    }

    #[test]
    fn mixing_preserves_feasibility(
        x in atoms_strategy(),
        y in atoms_strategy(),
        num in 0i64..=10,
        with_aa in any::<bool>(),
    ) {
        let (mx, my) = (x.marginals(with_aa), y.marginals(with_aa));
        let mixed = mx.mix(&my, &r(num, 10)).unwrap();
        mixed.validate().unwrap();
        prop_assert!(joint_exists(&mixed).unwrap().is_feasible());
    }

    #[test]
    fn json_round_trip(seed in any::<u64>(), index in 0u64..1000) {
        let m = random_system(seed, index);
        let back = MarginalSystem::from_json(&m.to_json()).unwrap();
        prop_assert_eq!(m, back);
    }

    #[test]
    fn verdicts_serialize(seed in any::<u64>(), index in 0u64..100) {
        let m = random_system(seed, index);
        let v = joint_exists(&m).unwrap();
        let json = serde_json::to_value(&v).unwrap();
        let tag = json["verdict"].as_str().unwrap();
        prop_assert_eq!(tag == "FEASIBLE", v.is_feasible());
        if v.is_feasible() {
            prop_assert_eq!(json["witness"].as_object().unwrap().len(), 8);
        } else {
            prop_assert!(json["certificate"]["inequality"].as_str().unwrap().ends_with(">= 0"));
        }
    }
}

#[test]
fn vertices_are_feasible_with_themselves_as_witness() {
    for i in 0..8 {
        let joint = JointAtomVector::vertex(i);
        let m = joint.marginals(true);
        match joint_exists(&m).unwrap() {
            JointVerdict::Feasible { witness } => assert_eq!(witness, joint),
            v => panic!("{v:?}"),
        }
    }
    assert!(JointAtomVector::new(std::array::from_fn(|_| Rational::zero())).is_err());
}
