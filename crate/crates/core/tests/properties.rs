use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use vtensor::check::{brute_force_match, default_check_config, fuzz};
use vtensor::pool::RadixTree;
use vtensor::{run_trace, AllocatorKind, RecordId, SimConfig, TraceRecord};

const TPC: usize = 4;

fn keys() -> impl Strategy<Value = Vec<Vec<u32>>> {
    // small alphabet so keys share prefixes often
    prop::collection::vec(
        (1usize..5).prop_flat_map(|chunks| prop::collection::vec(0u32..3, chunks * TPC)),
        0..12,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn radix_match_agrees_with_brute_force(
        keys in keys(),
        query in prop::collection::vec(0u32..3, 0..24),
        removals in prop::collection::vec(any::<prop::sample::Index>(), 0..4),
    ) {
        let mut tree = RadixTree::new(TPC);
        let mut by_record = BTreeMap::new();
        for (i, k) in keys.iter().enumerate() {
            if let Some(old) = tree.insert(k, RecordId(i as u64)) {
                by_record.remove(&old);
            }
            by_record.insert(RecordId(i as u64), k.clone());
        }
        let mut live: BTreeSet<Vec<u32>> = by_record.values().cloned().collect();
        for ix in removals {
            if live.is_empty() {
                break;
            }
            let k = ix.get(&live.iter().cloned().collect::<Vec<_>>()).clone();
            prop_assert!(tree.remove(&k).is_some());
            live.remove(&k);
        }
        prop_assert_eq!(tree.len(), live.len());

        let expected = brute_force_match(&live, &query, TPC);
        match (tree.match_prefix(&query), expected) {
            (None, None) => {}
            (Some((rec, len)), Some((want_len, shortest))) => {
                prop_assert_eq!(len, want_len);
                let key = &by_record[&rec];
                prop_assert!(live.contains(key));
                prop_assert_eq!(key.len(), shortest);
                prop_assert_eq!(&key[..len], &query[..len]);
            }
            (got, want) => prop_assert!(false, "tree {:?} vs brute force {:?}", got, want),
        }
    }

    #[test]
    fn fuzzed_op_logs_stay_clean(seed in any::<u64>(), alphabet in 2u32..6) {
        let (ops, report) = fuzz(default_check_config(), seed, 300, alphabet).map_err(TestCaseError::fail)?;
        prop_assert_eq!(ops.len(), report.ops_applied);
        prop_assert!(report.violations.is_empty(), "{:?}", report.violations);
    }
}

fn trace_strategy() -> impl Strategy<Value = Vec<TraceRecord>> {
    prop::collection::vec((0u64..6, 1usize..400, 1usize..120), 1..10).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (arrival_step, prompt_len, output_len))| TraceRecord {
                id: i as u64,
                arrival_step,
                conversation: None,
                prompt_len,
                prompt_tokens: None,
                output_len,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn breakdowns_sum_to_capacity_every_step(trace in trace_strategy(), tight in any::<bool>()) {
        let mut cfg = SimConfig { max_seq_len: 1024, max_batch: 4, ..SimConfig::default() };
        if tight {
            cfg.device.capacity_bytes = cfg.device.weights_bytes + (256 << 20);
        }
        for kind in AllocatorKind::ALL {
            let Ok(report) = run_trace(&trace, &cfg, kind) else { continue };
            for (i, b) in report.breakdowns().iter().enumerate() {
                prop_assert!(b.check().is_ok(), "{kind} step {i}: {:?}", b.check());
                prop_assert!(b.kv_used <= b.kv_allocated);
            }
            for r in &report.requests {
                prop_assert_eq!(r.generated, r.output_len);
            }
        }
    }

    #[test]
    fn ample_capacity_allocators_agree_on_used_bytes(trace in trace_strategy()) {
        let cfg = SimConfig::default();
        let reports: Vec<_> =
            AllocatorKind::ALL.iter().map(|&k| run_trace(&trace, &cfg, k).unwrap()).collect();
        let used = |i: usize| reports[i].steps.iter().map(|s| s.used_bytes).collect::<Vec<_>>();
        prop_assert_eq!(used(0), used(1));
        prop_assert_eq!(used(0), used(2));
        // released chunks stay cached for reuse, so compare peaks rather than steps
        let peak = |i: usize| reports[i].summary().peak_kv_allocated;
        prop_assert!(peak(2) <= peak(0), "vtensor {} native {}", peak(2), peak(0));
    }
}
