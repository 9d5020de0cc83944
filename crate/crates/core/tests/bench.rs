use amdkd_core::bench::*;
use amdkd_core::eval::{decode_best, DecodeSpec, GapReport};
use amdkd_core::instancegen::{generate_dataset, DistributionKind};
use amdkd_core::policy::{ArchSpec, PolicyParams};
use amdkd_core::problems::{Instance, ProblemKind};
use amdkd_core::rng::RngStream;
use amdkd_core::solvers::{solve_reference, ReferenceCache};
use amdkd_core::Error;
use proptest::prelude::*;

const TWO_CUSTOMERS: &str = "\
NAME : pair-k1
COMMENT : two customers, depot listed last
TYPE : CVRP
DIMENSION : 3
EDGE_WEIGHT_TYPE : EUC_2D
CAPACITY : 10
NODE_COORD_SECTION
1 0 0
2 10 0
3 5 5
DEMAND_SECTION
1 4
2 6
3 0
DEPOT_SECTION
3
-1
EOF
";

#[test]
fn cvrp_depot_moves_to_front_and_round_trips() {
    let b = parse_cvrplib(TWO_CUSTOMERS).unwrap();
    assert_eq!(b.node_ids, vec![3, 1, 2]);
    assert_eq!(b.coords[0], [5.0, 5.0]);
    assert_eq!(b.demands.as_deref(), Some(&[0, 4, 6][..]));
    assert_eq!(b.capacity, Some(10));
    assert_eq!(b.min_routes(), Some(1));
    assert_eq!(parse_cvrplib(&b.to_text()).unwrap(), b);
    let inst = b.instance().unwrap();
    assert_eq!(inst.depot(), Some(0));
    assert_eq!(inst.n_customers(), 2);
}

#[test]
fn declared_fleet_below_the_pigeonhole_bound_is_rejected() {
    let text = TWO_CUSTOMERS.replace("CAPACITY : 10", "CAPACITY : 7");
    match parse_cvrplib(&text) {
        Err(Error::Parse { msg, .. }) => assert!(msg.contains("at least 2"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let renamed = text.replace("pair-k1", "pair-k2");
    assert_eq!(parse_cvrplib(&renamed).unwrap().min_routes(), Some(2));
}

#[test]
fn cvrp_consistency_errors() {
    let over = TWO_CUSTOMERS.replace("2 6", "2 11");
    assert!(matches!(parse_cvrplib(&over), Err(Error::Parse { .. })));
    let no_demand = TWO_CUSTOMERS.replace("2 6\n", "");
    assert!(matches!(parse_cvrplib(&no_demand), Err(Error::Parse { .. })));
    let two_depots = TWO_CUSTOMERS.replace("3\n-1", "3\n1\n-1");
    assert!(matches!(parse_cvrplib(&two_depots), Err(Error::Unsupported(_))));
    let explicit = TWO_CUSTOMERS.replace("EUC_2D", "EXPLICIT");
    assert!(matches!(parse_cvrplib(&explicit), Err(Error::Unsupported(_))));
    assert!(matches!(parse_tsplib(TWO_CUSTOMERS), Err(Error::Parse { .. })));
}

#[test]
fn dimension_mismatch_names_the_dimension_line() {
    let text = TWO_CUSTOMERS.replace("DIMENSION : 3", "DIMENSION : 4");
    match parse_cvrplib(&text) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
        other => panic!("{other:?}"),
    }
}

#[test]
fn rounded_distances_follow_nint() {
    // Edge lengths 1.414.., 2.5 and 3.6055..: nint gives 1, 3 and 4.
    assert_eq!(rounded_distance([0.0, 0.0], [1.0, 1.0]), 1.0);
    assert_eq!(rounded_distance([0.0, 0.0], [1.5, 2.0]), 3.0);
    assert_eq!(rounded_distance([0.0, 0.0], [2.0, 3.0]), 4.0);
    let b = parse_cvrplib(TWO_CUSTOMERS).unwrap();
    // depot (5,5) to (0,0) and (10,0) are 7.07 -> 7 each; customer hop is 10.
    assert_eq!(b.rounded_length(&[1, 2, 0]), 24.0);
    assert_eq!(b.rounded_length(&[1, 0, 2, 0]), 28.0);
}

#[test]
fn published_values_resolve_by_name() {
    assert_eq!(published_optimum("kroA100"), Some(21282.0));
    assert_eq!(published_optimum("X-n101-k25"), Some(27591.0));
    assert_eq!(published_optimum("eil101"), Some(629.0));
    assert_eq!(published_optimum("nowhere"), None);
}

fn params(kind: ProblemKind, seed: u64) -> PolicyParams {
    PolicyParams::init(&ArchSpec::new(kind, 8), &mut RngStream::new(seed)).unwrap()
}

#[test]
fn benchmark_policy_tours_are_measured_on_original_coordinates() {
    let text = "NAME : kroA100\nTYPE : TSP\nDIMENSION : 5\nEDGE_WEIGHT_TYPE : EUC_2D\nNODE_COORD_SECTION\n1 0 0\n2 100 0\n3 100 50\n4 0 50\n5 50 25\nEOF\n";
    let b = parse_tsplib(text).unwrap();
    let p = params(ProblemKind::Tsp, 1);
    let r = evaluate_benchmark(&b, &p, DecodeSpec::greedy(), Normalization::MinMax, 0).unwrap();
    let tour = decode_best(
        &b.policy_instance(Normalization::MinMax).unwrap(),
        &p,
        DecodeSpec::greedy(),
        &mut RngStream::new(0),
    )
    .unwrap();
    assert_eq!(r.length, b.rounded_length(tour.sequence()));
    assert_eq!(r.reference, 21282.0);
    assert_eq!(r.gap, (r.length - 21282.0) / 21282.0);
}

fn groups(kind: ProblemKind, n: usize, count: usize) -> Vec<(String, Vec<Instance>)> {
    DistributionKind::EXEMPLARS
        .iter()
        .map(|&k| {
            (
                k.code().to_string(),
                generate_dataset(kind, &k.into(), n, count, 7).unwrap(),
            )
        })
        .collect()
}

#[test]
fn overall_gap_is_the_mean_of_distribution_gaps() {
    let gs = groups(ProblemKind::Tsp, 8, 6);
    let mut cache = ReferenceCache::new();
    for (_, insts) in &gs {
        cache.ensure(insts).unwrap();
    }
    let e = evaluate_groups(&params(ProblemKind::Tsp, 2), &gs, &cache, DecodeSpec::greedy(), 3).unwrap();
    let mean = e.report.gaps.iter().sum::<f64>() / 3.0;
    assert_eq!(e.report.overall, mean);
    for (d, g) in e.report.distributions.iter().zip(&e.report.gaps) {
        let rows: Vec<f64> = e.rows.iter().filter(|r| &r.distribution == d).filter_map(|r| r.gap).collect();
        assert_eq!(*g, rows.iter().sum::<f64>() / rows.len() as f64);
        assert!(rows.iter().all(|&x| x >= -1e-12), "exact references bound every tour");
    }
}

#[test]
fn missing_references_are_skipped() {
    let gs = groups(ProblemKind::Tsp, 8, 4);
    let mut cache = ReferenceCache::new();
    for (_, insts) in &gs {
        cache.ensure(&insts[1..]).unwrap();
    }
    let e = evaluate_groups(&params(ProblemKind::Tsp, 2), &gs, &cache, DecodeSpec::greedy(), 3).unwrap();
    assert_eq!(e.skipped(), 3);
    assert_eq!(e.rows.len(), 12);
    let empty = ReferenceCache::new();
    assert!(evaluate_groups(&params(ProblemKind::Tsp, 2), &gs, &empty, DecodeSpec::greedy(), 3).is_err());
}

#[test]
fn the_reference_solver_has_zero_gap() {
    for (_, insts) in groups(ProblemKind::Cvrp, 6, 3) {
        let mut cache = ReferenceCache::new();
        let refs = cache.ensure(&insts).unwrap();
        for (inst, r) in insts.iter().zip(refs) {
            assert_eq!(solve_reference(inst).unwrap().tour.length(), r);
        }
    }
}

#[test]
fn augmentation_and_more_samples_never_hurt() {
    for kind in [ProblemKind::Tsp, ProblemKind::Cvrp] {
        let p = params(kind, 5);
        for (_, insts) in groups(kind, 10, 4) {
            for inst in &insts {
                let rng = || RngStream::new(11);
                let g = decode_best(inst, &p, DecodeSpec::greedy(), &mut rng()).unwrap();
                let a = decode_best(inst, &p, DecodeSpec::greedy().with_augment(), &mut rng()).unwrap();
                assert!(a.length() <= g.length());
                let mut prev = f64::INFINITY;
                for k in [1, 4, 16, 64] {
                    let s = decode_best(inst, &p, DecodeSpec::sample(k), &mut rng()).unwrap();
                    assert!(s.length() <= prev, "sample-{k}");
                    prev = s.length();
                }
            }
        }
    }
}

#[test]
fn gap_table_layout() {
    let codes: Vec<String> = DistributionKind::ALL.iter().map(|k| k.code().to_string()).collect();
    let teacher = GapReport::new(codes.clone(), vec![0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07]);
    let student = GapReport::new(codes.clone(), vec![0.02; 7]);
    let mut out = Vec::new();
    write_gap_table(&[("teacher".into(), teacher), ("student".into(), student)], &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "model,G_U,G_C,G_M,G_E,G_I,G_X,G_G,Avg");
    assert!(lines[1].starts_with("teacher,0.01,"));
    assert!(lines[2].ends_with(",0.02"));
    let other = GapReport::new(codes[..3].to_vec(), vec![0.0; 3]);
    let mixed = [("a".to_string(), other), ("b".to_string(), GapReport::new(codes, vec![0.0; 7]))];
    assert!(write_gap_table(&mixed, Vec::new()).is_err());
}

fn tsp_text(points: &[(i32, i32)]) -> String {
    let mut s = format!(
        "NAME : random\nTYPE : TSP\nDIMENSION : {}\nEDGE_WEIGHT_TYPE : EUC_2D\nNODE_COORD_SECTION\n",
        points.len()
    );
    for (i, (x, y)) in points.iter().enumerate() {
        s.push_str(&format!("{} {x} {y}\n", i + 1));
    }
    s + "EOF\n"
}

proptest! {
    #[test]
    fn tsplib_round_trip(points in prop::collection::vec((-1000i32..1000, -1000i32..1000), 2..40)) {
        let a = parse_tsplib(&tsp_text(&points)).unwrap();
        prop_assert_eq!(a.dimension, points.len());
        prop_assert_eq!(parse_tsplib(&a.to_text()).unwrap(), a);
    }

    #[test]
    fn float_coordinates_round_trip(xs in prop::collection::vec((-1e6f64..1e6, -1e6f64..1e6), 2..20)) {
        let mut b = parse_tsplib(&tsp_text(&[(0, 0), (1, 1)])).unwrap();
        b.dimension = xs.len();
        b.node_ids = (1..=xs.len()).collect();
        b.coords = xs.iter().map(|&(x, y)| [x, y]).collect();
        prop_assert_eq!(parse_tsplib(&b.to_text()).unwrap(), b);
    }

    #[test]
    fn rounded_length_stays_within_half_a_unit_per_edge(
        points in prop::collection::vec((0i32..500, 0i32..500), 3..30),
    ) {
        let b = parse_tsplib(&tsp_text(&points)).unwrap();
        let inst = b.instance().unwrap();
        let seq: Vec<usize> = (0..points.len()).collect();
        let raw = amdkd_core::problems::sequence_length(&inst, &seq);
        prop_assert!((b.rounded_length(&seq) - raw).abs() <= 0.5 * points.len() as f64 + 1e-9);
    }
}
