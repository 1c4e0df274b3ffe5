//! Geohash and proximity search checked against the `geohash` crate and a
//! brute-force cell-membership filter.

use armada_lite::geo::{self, GeoHash, GeoPoint};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn reference(p: GeoPoint, precision: u8) -> String {
    geohash::encode(geohash::Coord { x: p.lon(), y: p.lat() }, precision as usize).unwrap()
}

/// Independent cell-or-neighbor membership using the reference crate.
fn reference_neighborhood(p: GeoPoint, precision: u8) -> Vec<String> {
    let h = reference(p, precision);
    let n = geohash::neighbors(&h).unwrap();
    vec![h, n.n, n.ne, n.e, n.se, n.s, n.sw, n.w, n.nw]
}

fn random_point(rng: &mut ChaCha8Rng) -> GeoPoint {
    GeoPoint::new(rng.gen_range(-89.0..89.0), rng.gen_range(-179.0..179.0)).unwrap()
}

#[test]
fn golden_minneapolis() {
    let h = geo::encode(GeoPoint::new(44.9778, -93.2650).unwrap(), 5).unwrap();
    assert_eq!(h.as_str(), "9zvxv");
}

#[test]
fn matches_reference_on_1000_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let p = random_point(&mut rng);
        let precision = rng.gen_range(1..=12);
        assert_eq!(geo::encode(p, precision).unwrap().as_str(), reference(p, precision), "{p} @ {precision}");
    }
}

#[test]
fn neighbors_match_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..300 {
        let p = random_point(&mut rng);
        let precision = rng.gen_range(2..=9);
        let h = geo::encode(p, precision).unwrap();
        let mut ours: Vec<String> = h.neighbors().iter().map(|n| n.as_str().to_string()).collect();
        let mut theirs = reference_neighborhood(p, precision)[1..].to_vec();
        ours.sort();
        theirs.sort();
        assert_eq!(ours, theirs, "{h}");
    }
}

#[test]
fn decode_encode_roundtrip_200_random_hashes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    const ALPHABET: &[u8] = b"0123456789bcdefghjkmnpqrstuvwxyz";
    for _ in 0..200 {
        let len = rng.gen_range(1..=12);
        let code: String = (0..len).map(|_| ALPHABET[rng.gen_range(0..32)] as char).collect();
        let h = GeoHash::parse(&code).unwrap();
        assert_eq!(geo::encode(h.decode(), h.precision()).unwrap(), h);
    }
}

#[test]
fn proximity_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for trial in 0..20 {
        let center = GeoPoint::new(44.97 + rng.gen_range(-0.3..0.3), -93.26 + rng.gen_range(-0.3..0.3)).unwrap();
        let nodes: Vec<GeoPoint> = (0..50)
            .map(|_| GeoPoint::new(center.lat() + rng.gen_range(-1.0..1.0), center.lon() + rng.gen_range(-1.0..1.0)).unwrap())
            .collect();
        for precision in 2..=6 {
            let area = reference_neighborhood(center, precision);
            let expect: Vec<GeoPoint> = nodes.iter().copied().filter(|n| area.contains(&reference(*n, precision))).collect();
            let got: Vec<GeoPoint> = geo::proximity_search(center, &nodes, precision).into_iter().copied().collect();
            assert_eq!(got, expect, "trial {trial} precision {precision}");
        }
    }
}

#[test]
fn widening_reaches_min_count_for_city_fixture() {
    // Nodes scattered across a metro area several km apart.
    let center = GeoPoint::new(44.9778, -93.2650).unwrap();
    let nodes: Vec<GeoPoint> = [
        (44.9740, -93.2277),
        (45.0105, -93.2843),
        (44.9375, -93.2010),
        (44.9212, -93.3502),
        (45.0611, -93.1500),
        (44.8547, -93.4708),
    ]
    .iter()
    .map(|&(a, b)| GeoPoint::new(a, b).unwrap())
    .collect();
    let start = 6;
    let at_start = geo::proximity_search(center, &nodes, start).len();
    assert!(at_start < 5);
    let (found, precision) = geo::widen_until(center, &nodes, 5, start);
    assert!(found.len() >= 5);
    assert!(precision < start);
    // oracle: the first precision (descending) where the reference neighborhood holds >= 5
    let oracle = (1..=start)
        .rev()
        .find(|&p| {
            let area = reference_neighborhood(center, p);
            nodes.iter().filter(|n| area.contains(&reference(**n, p))).count() >= 5
        })
        .unwrap();
    assert_eq!(precision, oracle);
}

#[test]
fn widening_covers_metro_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let center = GeoPoint::new(rng.gen_range(-60.0..60.0), rng.gen_range(-170.0..170.0)).unwrap();
        // within ~250 km of the center, so every pair is within 500 km
        let nodes: Vec<GeoPoint> = (0..rng.gen_range(3..12))
            .map(|_| GeoPoint::new(center.lat() + rng.gen_range(-1.5..1.5), center.lon() + rng.gen_range(-1.5..1.5)).unwrap())
            .collect();
        let min = rng.gen_range(1..=nodes.len());
        let (found, _) = geo::widen_until(center, &nodes, min, 8);
        assert!(found.len() >= min);
    }
}

proptest! {
    #[test]
    fn proximity_monotone_in_precision(
        clat in -60.0f64..60.0, clon in -170.0f64..170.0,
        offsets in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 0..30),
        precision in 1u8..11,
    ) {
        let center = GeoPoint::new(clat, clon).unwrap();
        let nodes: Vec<GeoPoint> = offsets.iter().map(|(a, b)| GeoPoint::new(clat + a, clon + b).unwrap()).collect();
        let coarse = geo::proximity_search(center, &nodes, precision);
        let fine = geo::proximity_search(center, &nodes, precision + 1);
        for n in fine {
            prop_assert!(coarse.iter().any(|c| std::ptr::eq(*c, n)));
        }
    }

    #[test]
    fn haversine_symmetric_nonnegative(a in -89.0f64..89.0, b in -179.0f64..179.0, c in -89.0f64..89.0, d in -179.0f64..179.0) {
        let p = GeoPoint::new(a, b).unwrap();
        let q = GeoPoint::new(c, d).unwrap();
        let pq = geo::haversine_km(p, q);
        prop_assert!(pq >= 0.0);
        prop_assert!((pq - geo::haversine_km(q, p)).abs() < 1e-9);
        if p != q { prop_assert!(pq > 0.0); }
    }

    #[test]
    fn prefix_contains_cell(a in -89.0f64..89.0, b in -179.0f64..179.0, precision in 2u8..=12) {
        let p = GeoPoint::new(a, b).unwrap();
        let full = geo::encode(p, precision).unwrap();
        let prefix = geo::encode(p, precision - 1).unwrap();
        prop_assert!(prefix.contains(&full));
        prop_assert!(prefix.cell().contains(full.decode()));
    }
}
