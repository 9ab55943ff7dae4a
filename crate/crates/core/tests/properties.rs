use proptest::prelude::*;

use nicsim::model::{aux_line_count, decode_dispatch_record, encode_dispatch_record, CostModel};

fn cost_with_line(line_size: u32) -> CostModel {
    CostModel {
        line_size,
        ..CostModel::default()
    }
}

/// Packs a payload greedily: header and inline bytes share the first line,
/// every further line holds `line` bytes.
fn packed_aux_lines(args_len: usize, line: usize) -> u32 {
    let mut left = args_len;
    let mut room = line - 18;
    let mut lines = 0;
    while left > 0 {
        if room == 0 {
            lines += 1;
            room = line;
        }
        let take = left.min(room);
        left -= take;
        room -= take;
    }
    lines
}

#[test]
fn aux_count_matches_greedy_packing() {
    for line in [64usize, 128, 256] {
        for len in 0..=1024 {
            assert_eq!(aux_line_count(len, line), packed_aux_lines(len, line), "len {len} line {line}");
        }
    }
}

#[test]
fn inline_boundary_at_128_byte_lines() {
    assert_eq!(aux_line_count(0, 128), 0);
    assert_eq!(aux_line_count(110, 128), 0);
    assert_eq!(aux_line_count(111, 128), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn encode_decode_round_trip(
        line_size in prop::sample::select(vec![64u32, 128, 256]),
        code_ptr in any::<u64>(),
        data_ptr in any::<u64>(),
        args in prop::collection::vec(any::<u8>(), 0..4_096),
    ) {
        let cost = cost_with_line(line_size);
        let rec = encode_dispatch_record(code_ptr, data_ptr, &args, &cost).unwrap();
        let lines = rec.to_lines();
        prop_assert_eq!(lines.len() as u32, 1 + rec.aux_count);
        prop_assert!(lines.iter().all(|l| l.len() == line_size as usize));
        let back = decode_dispatch_record(&lines, &cost).unwrap();
        prop_assert_eq!(back.code_ptr, code_ptr);
        prop_assert_eq!(back.data_ptr, data_ptr);
        prop_assert_eq!(back.args, args);
    }
}

proptest! {
    #[test]
    fn dropping_an_aux_line_is_detected(args in prop::collection::vec(any::<u8>(), 111..4_096)) {
        let cost = CostModel::default();
        let mut lines = encode_dispatch_record(1, 2, &args, &cost).unwrap().to_lines();
        lines.pop();
        prop_assert!(decode_dispatch_record(&lines, &cost).is_err());
    }

    #[test]
    fn payloads_at_threshold_are_refused(extra in 0usize..64) {
        let cost = CostModel::default();
        let args = vec![0u8; cost.dma_threshold as usize + extra];
        prop_assert!(encode_dispatch_record(0, 0, &args, &cost).is_err());
    }
}
