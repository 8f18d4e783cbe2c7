//! Sender and receiver engines driven against each other without any I/O.

use std::collections::{HashMap, HashSet};
use std::time::Duration;

use liquid_core::codec::{CodecKind, SourceBlock};
use liquid_core::planner::PlanParams;
use liquid_core::receiver::{Receiver, ReceiverConfig};
use liquid_core::sender::{Sender, SenderConfig};
use liquid_core::sim::{run_liquid, LossModel, SimConfig};
use liquid_core::trace::LossTrace;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SYMBOL: u16 = 16;

fn pair() -> (Sender, Receiver) {
    let codec = CodecKind::Linear.build();
    let tx = Sender::new(
        codec.clone(),
        SenderConfig {
            symbol_size: SYMBOL,
            ..SenderConfig::default()
        },
    );
    (tx, Receiver::new(codec, ReceiverConfig::default()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Feedback only ever reports what actually arrived, and acting on it
    /// gets every block through without resending a symbol.
    #[test]
    fn feedback_is_sound(
        seed in any::<u64>(),
        loss in 0.0f64..0.5,
        sizes in proptest::collection::vec(1usize..400, 1..8),
        reorder in 1usize..6,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut tx, mut rx) = pair();
        let mut blocks = HashMap::new();
        for (i, &len) in sizes.iter().enumerate() {
            let data: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            let plan = tx.submit_block(data.clone(), Duration::ZERO).unwrap();
            prop_assert_eq!(plan.block_id, i as u64);
            blocks.insert(plan.block_id, data);
        }

        let mut arrived_per_block: HashMap<u64, u32> = HashMap::new();
        let mut sent_per_block: HashMap<u64, u32> = HashMap::new();
        let mut pairs = HashSet::new();
        let mut arrivals = 0u64;
        let mut max_seq = None;
        let mut delivered = HashMap::new();
        let mut now = Duration::ZERO;
        for _round in 0..200 {
            now += Duration::from_millis(5);
            let mut burst = Vec::new();
            while let Some(p) = tx.next_packet(now) {
                *sent_per_block.entry(p.header.block_id).or_default() += 1;
                prop_assert!(pairs.insert((p.header.block_id, p.header.esi)), "resent {:?}", p.header);
                if !rng.gen_bool(loss) {
                    burst.push(p);
                }
            }
            // Reorder within small windows.
            for chunk in burst.chunks_mut(reorder) {
                chunk.shuffle(&mut rng);
            }
            for p in &burst {
                rx.on_data(&p.header, &p.payload, now).unwrap();
                arrivals += 1;
                max_seq = max_seq.max(Some(p.header.global_seq));
                *arrived_per_block.entry(p.header.block_id).or_default() += 1;
            }
            for b in rx.take_delivered() {
                prop_assert!(b.symbols_received <= arrived_per_block[&b.block_id]);
                delivered.insert(b.block_id, b.data);
            }

            let fb = rx.make_feedback();
            prop_assert_eq!(fb.total_data_packets_received, arrivals);
            prop_assert_eq!(fb.highest_seq_seen, max_seq);
            for e in &fb.entries {
                let arrived = arrived_per_block.get(&e.block_id).copied().unwrap_or(0);
                prop_assert!(e.symbols_received <= arrived);
                prop_assert!(arrived <= sent_per_block[&e.block_id]);
            }
            tx.on_feedback(&fb, now).unwrap();
            if delivered.len() == blocks.len() && !tx.has_pending() {
                break;
            }
        }
        prop_assert_eq!(delivered.len(), blocks.len());
        for (id, data) in &blocks {
            prop_assert_eq!(&delivered[id], data);
        }
    }
}

/// With symbols arriving in random order, a block is decodable from at most
/// K + 3 of them in at least 99% of trials.
#[test]
fn receiver_decodes_near_k() {
    let codec = CodecKind::Linear.build();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let trials = 1000;
    let mut within = 0;
    let mut worst = 0;
    for t in 0..trials {
        let k: u32 = rng.gen_range(1..=64);
        let len = k as usize * SYMBOL as usize;
        let data: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        let enc = codec.encoder(SourceBlock::new(t, data.clone(), SYMBOL as usize).unwrap());
        let mut esis: Vec<u32> = (0..3 * k + 8).collect();
        esis.shuffle(&mut rng);
        let mut rx = Receiver::new(codec.clone(), ReceiverConfig::default());
        let mut used = 0;
        for (i, &esi) in esis.iter().enumerate() {
            let header = liquid_core::wire::DataHeader {
                global_seq: i as u64,
                block_id: t,
                esi,
                block_size_bytes: len as u32,
                symbol_size: SYMBOL,
            };
            rx.on_data(&header, &enc.encode(esi).payload, Duration::ZERO).unwrap();
            used += 1;
            if let Some(b) = rx.take_delivered().pop() {
                assert_eq!(b.data, data);
                break;
            }
        }
        worst = worst.max(used - k);
        if used <= k + 3 {
            within += 1;
        }
    }
    assert!(within * 100 >= trials * 99, "only {within}/{trials} within K+3, worst K+{worst}");
}

/// Under i.i.d. loss with a warmed estimator, symbols sent per block stay
/// between the erasure floor 1/(1-p) and 12% above it.
#[test]
fn surplus_bounded_under_stationary_loss() {
    for (i, &p) in [0.0, 0.01, 0.03, 0.06, 0.1].iter().enumerate() {
        let mut cfg = SimConfig::synthetic_150mbps();
        cfg.frames = 120;
        cfg.seed = 40 + i as u64;
        cfg.loss = LossModel::Trace(LossTrace::constant(p));
        let r = run_liquid(&cfg, &PlanParams::default()).unwrap();
        assert!(r.all_delivered(), "p={p}");
        // Skip the first second while the estimator warms up.
        let ratios: Vec<f64> = r.frames[30..]
            .iter()
            .map(|f| f.packets_sent as f64 / cfg.packets_per_frame as f64)
            .collect();
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        let floor = 1.0 / (1.0 - p);
        assert!(mean >= floor && mean <= 1.12 * floor, "p={p}: mean {mean:.4}, floor {floor:.4}");
    }
}
