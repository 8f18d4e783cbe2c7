use liquid_core::codec::CodecKind;
use liquid_core::emu::{run_emulated, ImpairmentProfile, SessionConfig, StreamProfile};
use liquid_core::planner::PlanParams;
use liquid_core::trace::LossTrace;

fn stepped(seed: u64) -> (StreamProfile, ImpairmentProfile) {
    let stream = StreamProfile {
        fps: 30.0,
        frame_size_pattern: vec![500_000],
        duration_s: 20.0,
    };
    let imp = ImpairmentProfile {
        forward_delay_ms: 20.0,
        reverse_delay_ms: 20.0,
        loss: LossTrace::steps(&[0.01, 0.05, 0.1, 0.02], 5.0),
        reverse_loss: 0.0,
        rate_cap_mbps: Some(1000.0),
        seed,
    };
    (stream, imp)
}

fn ideal() -> SessionConfig {
    SessionConfig {
        codec: CodecKind::Ideal,
        ..SessionConfig::default()
    }
}

#[test]
fn realized_loss_tracks_schedule_per_segment() {
    for seed in 1..=3 {
        let (stream, imp) = stepped(seed);
        let r = run_emulated(&stream, &imp, &PlanParams::default(), &ideal()).unwrap();
        assert!(r.all_delivered());
        let segs = &r.metadata.segments;
        assert_eq!(segs.len(), 4);
        for s in segs {
            assert!(s.packets > 40_000, "{s:?}");
            let err = (s.realized() - s.scheduled).abs();
            assert!(err <= 0.005, "seed {seed}: {s:?} realized {:.4}", s.realized());
        }
    }
}

#[test]
fn same_seed_same_run() {
    let (stream, imp) = stepped(9);
    let a = run_emulated(&stream, &imp, &PlanParams::default(), &ideal()).unwrap();
    let b = run_emulated(&stream, &imp, &PlanParams::default(), &ideal()).unwrap();
    assert_eq!(a, b);
    let (_, other) = stepped(10);
    let c = run_emulated(&stream, &other, &PlanParams::default(), &ideal()).unwrap();
    assert_ne!(a.metadata.forward_lost, c.metadata.forward_lost);
}

#[test]
fn lossy_feedback_path_still_delivers() {
    let (mut stream, mut imp) = stepped(4);
    stream.duration_s = 5.0;
    stream.frame_size_pattern = vec![40_000];
    imp.loss = LossTrace::constant(0.05);
    imp.reverse_loss = 0.2;
    let r = run_emulated(&stream, &imp, &PlanParams::default(), &SessionConfig::default()).unwrap();
    assert!(r.all_delivered());
    assert_eq!(r.metadata.corrupt_blocks, 0);
    assert_eq!(r.metadata.duplicate_sends, 0);
    assert!(r.metadata.feedback_fraction() < 0.01);
}
