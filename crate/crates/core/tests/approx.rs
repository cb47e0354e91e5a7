use hsd::approx::{
    build_hierarchical_sequence, default_battery, gradient_defect, l1_norm_of_difference, partial_field,
    primitive_field, staircase, verify_convergence, verify_plan_convergence, verify_tv_bound, ApproximationPlan,
    Construction, ConvergenceOptions, SBVFamily, Sampling,
};
use hsd::hierarchy::HierarchicalDeformation;
use hsd::sbvmesh::{affine_field, total_variation, Grid, Piece, SBVField};
use hsd::{Error, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn s(v: f64) -> Matrix {
    Matrix::scalar(v)
}

fn unit_interval(n: usize) -> Grid {
    Grid::unit_cube(1, n).unwrap().with_box(vec![[0.0, 1.0]]).unwrap()
}

fn identity_line() -> SBVField {
    affine_field(&unit_interval(1), &s(1.0)).unwrap()
}

#[test]
fn primitive_of_constant_is_exact() {
    let grid = unit_interval(4);
    let p = primitive_field(&grid, &vec![s(1.0); 4], None).unwrap();
    assert_eq!(p.jump_mass, 0.0);
    for x in [0.0, 0.3, 0.8, 1.0] {
        assert!((p.field.value_at(&[x]).unwrap()[0] - x).abs() < 1e-15);
    }
}

#[test]
fn primitive_of_a_sign_step() {
    let grid = unit_interval(2);
    let p = primitive_field(&grid, &[s(-1.0), s(1.0)], None).unwrap();
    assert!(p.jump_mass < 1e-15);
    assert!((total_variation(&p.field) - 1.0).abs() < 1e-15);
    assert!((p.f_l1 - 1.0).abs() < 1e-15);
}

#[test]
fn laminate_primitive_in_two_dimensions() {
    let grid = Grid::unit_cube(2, 4).unwrap();
    let mesh = grid.mesh();
    let e11 = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
    let f: Vec<Matrix> = mesh
        .elements
        .iter()
        .map(|e| {
            if e.centroid[0] > 0.0 {
                e11.clone()
            } else {
                Matrix::zeros(2, 2)
            }
        })
        .collect();
    let p = primitive_field(&grid, &f, Some(0)).unwrap();
    assert!(p.jump_mass < 1e-14);
    for x in [[-0.4, 0.1], [0.2, -0.3], [0.45, 0.45]] {
        let v = p.field.value_at(&x).unwrap();
        // u(x) = (max(x₁, 0), 0) up to the constant fixed at the left edge
        assert!((v[0] - x[0].max(0.0)).abs() < 1e-14, "{v:?}");
        assert!(v[1].abs() < 1e-14);
    }
    let constant = vec![e11.clone(); mesh.elements.len()];
    assert!(primitive_field(&grid, &constant, Some(1)).is_ok());
    let varying: Vec<Matrix> = mesh
        .elements
        .iter()
        .map(|e| {
            if e.centroid[1] > 0.0 {
                e11.clone()
            } else {
                Matrix::zeros(2, 2)
            }
        })
        .collect();
    assert!(matches!(
        primitive_field(&grid, &varying, Some(0)),
        Err(Error::Unsupported(_))
    ));
    assert!(matches!(
        primitive_field(&grid, &varying, None),
        Err(Error::Unsupported(_))
    ));
}

#[test]
fn staircase_of_the_identity() {
    let st = staircase(&identity_line(), 4, Sampling::Floor).unwrap();
    assert!((st.l1_residual - 0.125).abs() < 1e-15);
    let mid = staircase(&identity_line(), 4, Sampling::Midpoint).unwrap();
    assert!((mid.l1_residual - 0.0625).abs() < 1e-15);
    let c = affine_field(&unit_interval(3), &s(0.0))
        .unwrap()
        .shifted(&[2.5])
        .unwrap();
    let st = staircase(&c, 6, Sampling::Floor).unwrap();
    assert_eq!(st.l1_residual, 0.0);
    assert_eq!(st.tv_residual, 0.0);
}

#[test]
fn staircase_total_variation_converges() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let grid = unit_interval(2);
    let cells = (0..2)
        .map(|k| Piece {
            offset: vec![k as f64 * rng.gen_range(1.0..2.0)],
            slope: s(rng.gen_range(-1.0..1.0)),
        })
        .collect();
    let u = SBVField::new(grid, cells).unwrap();
    let tv = total_variation(&u);
    let (mut prev_l1, mut prev_tv) = (f64::INFINITY, f64::INFINITY);
    for n in [8, 16, 32] {
        let st = staircase(&u, n, Sampling::Floor).unwrap();
        assert!(st.l1_residual <= prev_l1);
        assert!(st.tv_residual.abs() <= prev_tv + 1e-15);
        prev_l1 = st.l1_residual;
        prev_tv = st.tv_residual.abs();
    }
    assert!(prev_tv <= 0.05 * tv, "{prev_tv} vs {tv}");
}

fn one_level() -> HierarchicalDeformation {
    HierarchicalDeformation::uniform(identity_line(), &[s(0.0)], 2.0).unwrap()
}

fn two_level() -> HierarchicalDeformation {
    HierarchicalDeformation::uniform(identity_line(), &[s(0.5), s(0.0)], 2.0).unwrap()
}

#[test]
fn single_level_family_distances() {
    let plan = ApproximationPlan::new(one_level(), vec![vec![4, 8, 16, 32]], Construction::Primitive1d).unwrap();
    let fam = build_hierarchical_sequence(&plan).unwrap();
    for m in &fam.members {
        let n = m.indices[0] as f64;
        let d = l1_norm_of_difference(&m.field, plan.target.g()).unwrap();
        assert!((d - 1.0 / (2.0 * n)).abs() <= 1e-12, "{d}");
        assert_eq!(gradient_defect(&m.field, &plan.target, 1).unwrap(), 0.0);
    }
    let battery = default_battery(plan.target.g().grid(), 0);
    let report = verify_convergence(&fam, &plan.target, &battery, ConvergenceOptions::default()).unwrap();
    assert!(report.pass, "{report:?}");
    let l1: Vec<f64> = report.rows.iter().map(|r| r.l1_distance).collect();
    for (v, n) in l1.iter().zip([4.0, 8.0, 16.0, 32.0]) {
        assert!((v - 1.0 / (2.0 * n)).abs() <= 1e-12);
    }
    assert!(report.to_csv().starts_with("n1,l1_distance"));
}

#[test]
fn two_level_family_has_the_prescribed_gradients() {
    let plan = ApproximationPlan::new(two_level(), vec![vec![2, 4], vec![3, 6]], Construction::Primitive1d).unwrap();
    let fam = build_hierarchical_sequence(&plan).unwrap();
    assert_eq!(fam.members.len(), 4);
    let correctors: Vec<_> = (1..=2).map(|l| plan.corrector(l).unwrap()).collect();
    for m in &fam.members {
        assert_eq!(gradient_defect(&m.field, &plan.target, 2).unwrap(), 0.0);
        let g1 = partial_field(&plan, &correctors, &m.indices[..1]).unwrap();
        assert_eq!(gradient_defect(&g1, &plan.target, 1).unwrap(), 0.0);
    }
    let battery = default_battery(plan.target.g().grid(), 1);
    let report = verify_plan_convergence(&plan, &fam, &battery, ConvergenceOptions::default()).unwrap();
    assert!(report.moments_pass);
    assert!(report.rows.iter().all(|r| r.partial_l1.iter().all(Option::is_some)));
}

#[test]
fn classical_target_gives_a_constant_family() {
    let g = identity_line();
    let target = HierarchicalDeformation::uniform(g.clone(), &[s(1.0), s(1.0)], 2.0).unwrap();
    let plan = ApproximationPlan::new(target, vec![vec![2, 5], vec![3]], Construction::Primitive1d).unwrap();
    let fam = build_hierarchical_sequence(&plan).unwrap();
    for m in &fam.members {
        assert!(l1_norm_of_difference(&m.field, &g).unwrap() < 1e-15);
    }
}

#[test]
fn tv_bound_report_for_the_single_level_family() {
    let plan = ApproximationPlan::new(one_level(), vec![vec![4, 8, 16, 32]], Construction::Primitive1d).unwrap();
    let fam = build_hierarchical_sequence(&plan).unwrap();
    let rep = verify_tv_bound(&fam, &plan.target).unwrap();
    // ‖g‖_{L¹} + |Dg| = 1/2 + 1, and |Du_n| = (n − 1)/n
    assert!((rep.sd_norm - 1.5).abs() < 1e-15);
    for r in &rep.rows {
        let n = r.indices[0] as f64;
        assert!((r.ratio - (n - 1.0) / n / 1.5).abs() < 1e-14);
    }
    assert!(rep.constant <= 1.0);
    assert!(verify_tv_bound(&fam, &two_level()).is_err());
}

#[test]
fn incomplete_index_grids_are_rejected() {
    let plan = ApproximationPlan::new(two_level(), vec![vec![2, 4], vec![3, 6]], Construction::Primitive1d).unwrap();
    let mut fam = build_hierarchical_sequence(&plan).unwrap();
    fam.members.pop();
    let battery = default_battery(plan.target.g().grid(), 1);
    assert!(verify_convergence(&fam, &plan.target, &battery, ConvergenceOptions::default()).is_err());
    assert!(verify_convergence(&fam, &plan.target, &[], ConvergenceOptions::default()).is_err());
}

#[test]
fn laminate_plan_in_two_dimensions() {
    let grid = Grid::unit_cube(2, 2).unwrap();
    let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.0]]).unwrap();
    let g = affine_field(&grid, &a).unwrap();
    let target = HierarchicalDeformation::uniform(g, &[Matrix::zeros(2, 2)], 2.0).unwrap();
    let plan = ApproximationPlan::new(target, vec![vec![2, 4, 8]], Construction::LaminateNd { axes: vec![0] }).unwrap();
    let fam = build_hierarchical_sequence(&plan).unwrap();
    for m in &fam.members {
        assert_eq!(gradient_defect(&m.field, &plan.target, 1).unwrap(), 0.0);
    }
    let rep = verify_tv_bound(&fam, &plan.target).unwrap();
    assert!(rep.constant.is_finite());
    assert!(ApproximationPlan::new(plan.target.clone(), vec![vec![2]], Construction::Primitive1d).is_err());
}

#[test]
fn family_round_trips_through_json() {
    let plan = ApproximationPlan::new(one_level(), vec![vec![2, 3]], Construction::Primitive1d).unwrap();
    let fam = build_hierarchical_sequence(&plan).unwrap();
    let json = fam.to_json().unwrap();
    assert!(json.contains("sbvfamily-v1"));
    assert_eq!(SBVFamily::from_json(&json).unwrap(), fam);
}
