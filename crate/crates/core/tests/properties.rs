//! Property tests for the filter stack and its serializations.

use proptest::prelude::*;

use psnym::credentials::{element_key, Lifetime, LifetimeMode, MockScheme, Pseudonym, SignatureScheme};
use psnym::filter::{
    BloomFilter, CountingBloomFilter, Coverage, ElementKey, FilterParams, HashList,
};
use psnym::validation::TokenBucket;

fn keys(max: usize) -> impl Strategy<Value = Vec<ElementKey>> {
    prop::collection::btree_set(prop::collection::vec(any::<u8>(), 1..24), 0..max)
        .prop_map(|set| set.into_iter().map(|b| ElementKey::new(b).unwrap()).collect())
}

fn params() -> impl Strategy<Value = FilterParams> {
    (6u32..12, 1u8..9, any::<u64>())
        .prop_map(|(log2_bits, hashes, seed)| FilterParams::new(1 << log2_bits, hashes, 64, seed).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn no_false_negatives_ever(params in params(), members in keys(60)) {
        let mut oracle = HashList::new();
        for k in &members {
            oracle.insert(k);
        }
        let bf = BloomFilter::from_keys(&params, 0, Coverage::new(0, 0), &members).unwrap();
        for k in &members {
            prop_assert!(oracle.contains(k));
            prop_assert!(bf.query(k));
        }
    }

    #[test]
    fn projection_agrees_with_direct_filter(
        params in params(),
        members in keys(60),
        probes in keys(40),
    ) {
        let mut cbf = CountingBloomFilter::new(params).unwrap();
        for k in &members {
            cbf.insert(k);
        }
        let direct = BloomFilter::from_keys(&params, 5, Coverage::new(1, 2), &members).unwrap();
        let projected = cbf.project(5, Coverage::new(1, 2));
        prop_assert_eq!(&projected, &direct);
        for k in members.iter().chain(probes.iter()) {
            prop_assert_eq!(projected.query(k), direct.query(k));
        }
    }

    #[test]
    fn delete_equivalence(params in params(), kept in keys(30), removed in keys(30)) {
        // Wide counters so nothing saturates at this scale.
        let removed: Vec<ElementKey> =
            removed.into_iter().filter(|k| !kept.contains(k)).collect();
        let mut both = CountingBloomFilter::with_counter_bits(params, 8).unwrap();
        for k in kept.iter().chain(removed.iter()) {
            both.insert(k);
        }
        for k in &removed {
            both.delete(k).unwrap();
        }
        let mut only_kept = CountingBloomFilter::with_counter_bits(params, 8).unwrap();
        for k in &kept {
            only_kept.insert(k);
        }
        prop_assert_eq!(both.overflow_count(), 0);
        let cov = Coverage::new(0, 0);
        prop_assert_eq!(both.project(0, cov), only_kept.project(0, cov));
    }

    #[test]
    fn delta_round_trip_is_identity(
        params in params(),
        base in keys(50),
        added in keys(20),
    ) {
        let old = BloomFilter::from_keys(&params, 3, Coverage::new(0, 9), &base).unwrap();
        let new = BloomFilter::from_keys(
            &params,
            4,
            Coverage::new(0, 9),
            base.iter().chain(added.iter()),
        )
        .unwrap();
        let delta = old.delta_to(&new).unwrap();
        let decoded = psnym::filter::BfDelta::decode(&delta.encode()).unwrap();
        prop_assert_eq!(&decoded, &delta);
        prop_assert_eq!(old.apply_delta(&decoded).unwrap(), new);
    }

    #[test]
    fn snapshot_serialization_round_trip(
        params in params(),
        members in keys(50),
        version in any::<u64>(),
        start in any::<u64>(),
        len in any::<u64>(),
    ) {
        let bf =
            BloomFilter::from_keys(&params, version, Coverage::new(start, len), &members).unwrap();
        prop_assert_eq!(BloomFilter::decode(&bf.encode()).unwrap(), bf);
    }

    #[test]
    fn counting_serialization_round_trip(params in params(), members in keys(50)) {
        let mut cbf = CountingBloomFilter::new(params).unwrap();
        for k in &members {
            cbf.insert(k);
        }
        prop_assert_eq!(CountingBloomFilter::decode(&cbf.encode()).unwrap(), cbf);
    }

    #[test]
    fn pseudonym_serialization_round_trip(
        pk in prop::collection::vec(any::<u8>(), 1..80),
        sig in prop::collection::vec(any::<u8>(), 0..80),
        not_before in 0u64..1 << 40,
        span in 1u64..1 << 20,
        issuer in "[a-z]{1,12}",
    ) {
        let p = Pseudonym {
            scheme_id: 1,
            public_key: pk,
            lifetime: Lifetime::new(not_before, not_before + span).unwrap(),
            issuer_id: issuer,
            signature: sig,
        };
        prop_assert_eq!(Pseudonym::decode(&p.encode()).unwrap(), p);
    }

    #[test]
    fn fpl_round_trip_preserves_membership(member_keys in keys(40), probe_keys in keys(20)) {
        let scheme = MockScheme::seeded(5);
        let issuer = scheme.keygen();
        let mut fpl = psnym::credentials::FakePseudonymList::new();
        fpl.sign(&scheme, &issuer.secret);
        for k in &member_keys {
            fpl.add_signed(k, &scheme, &issuer.secret);
        }
        let decoded = psnym::credentials::FakePseudonymList::decode(&fpl.encode()).unwrap();
        prop_assert_eq!(&decoded, &fpl);
        for k in &member_keys {
            prop_assert!(decoded.contains(k));
        }
        for k in probe_keys.iter().filter(|k| !member_keys.contains(k)) {
            prop_assert!(!decoded.contains(k));
        }
        prop_assert!(decoded.verify(&scheme, &issuer.public));
    }

    #[test]
    fn token_bucket_law(
        rate in 0.0f64..50.0,
        burst in 0.0f64..50.0,
        gaps in prop::collection::vec(0.0f64..0.5, 1..400),
    ) {
        let mut bucket = TokenBucket::new(rate, burst);
        let mut now = 0.0;
        let mut granted = 0u64;
        for gap in gaps {
            now += gap;
            if bucket.try_take(now) {
                granted += 1;
            }
        }
        // One extra token's worth of slack covers the fractional start.
        prop_assert!(granted as f64 <= burst + rate * now + 1.0);
    }

    #[test]
    fn non_overlapping_lifetimes_tile_any_window(
        count in 1u32..200,
        start in 0u64..1 << 40,
        span_per in 1u64..2000,
    ) {
        // Slot boundaries from the same floor-division rule as issuance.
        let span = span_per as u128 * count as u128;
        let bounds: Vec<u64> = (0..=count as u128)
            .map(|i| start + (span * i / count as u128) as u64)
            .collect();
        prop_assert_eq!(bounds[0], start);
        prop_assert_eq!(bounds[count as usize] as u128, start as u128 + span);
        for w in bounds.windows(2) {
            prop_assert!(w[0] < w[1], "empty slot");
        }
    }

    #[test]
    fn element_key_injective_per_mode(
        pk_a in prop::collection::vec(any::<u8>(), 1..16),
        pk_b in prop::collection::vec(any::<u8>(), 1..16),
        lt_a in (0u64..1000).prop_map(|s| Lifetime::new(s, s + 10).unwrap()),
        lt_b in (2000u64..3000).prop_map(|s| Lifetime::new(s, s + 10).unwrap()),
    ) {
        let a = element_key(&pk_a, &lt_a, LifetimeMode::NonOverlapping);
        let b = element_key(&pk_b, &lt_b, LifetimeMode::NonOverlapping);
        // Distinct lifetimes force distinct keys even for equal pks.
        prop_assert_ne!(a, b);
        if pk_a != pk_b {
            prop_assert_ne!(
                element_key(&pk_a, &lt_a, LifetimeMode::Overlapping),
                element_key(&pk_b, &lt_b, LifetimeMode::Overlapping)
            );
        }
    }
}
