mod common;

use common::{bitwise_equal, max_rel_error, small_config};
use exitpipe::data::random_batch;
use exitpipe::model::{EarlyExitModel, ExitSpec, HeadKind, ModelConfig};
use exitpipe::pipeline::engine::{run_iteration, sync_tied, Extra, IterationOptions};
use exitpipe::pipeline::{plan_bubble_fill, ModelProgram, StageProgram, WeightSchedule};
use exitpipe::schedule::{simulate, verify_against_replay, ExitMode, Variant};
use exitpipe::Error;

fn setup(cfg: ModelConfig, rows: usize, m: usize, seed: u64) -> (EarlyExitModel, Vec<exitpipe::data::Batch>, Vec<f64>) {
    let model = EarlyExitModel::build(cfg.clone(), seed).unwrap();
    let batch = random_batch(rows * m, cfg.max_seq_len, cfg.vocab_size, seed + 100);
    let micro = batch.split(m).unwrap();
    (model, micro, cfg.default_weights())
}

fn oracle(model: &EarlyExitModel, micro: &[exitpipe::data::Batch], w: &[f64]) -> exitpipe::model::ParamMap {
    let rows: usize = micro.iter().map(|b| b.rows).sum();
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for b in micro {
        inputs.extend_from_slice(&b.inputs);
        targets.extend_from_slice(&b.targets);
    }
    let full = exitpipe::data::Batch::new(rows, micro[0].seq, inputs, targets).unwrap();
    model.accumulated_grads(&full, w, micro.len()).unwrap()
}

#[test]
fn four_stages_six_microbatches_match_single_device() {
    let (model, micro, w) = setup(small_config(8, &[2, 4], false), 2, 6, 1);
    let prog = ModelProgram::new(&model, 4).unwrap();
    let out = run_iteration(&prog, &micro, &Extra::default(), &IterationOptions::new(WeightSchedule::constant(w.clone()))).unwrap();
    let (name, err) = max_rel_error(&out.grads, &oracle(&model, &micro, &w));
    assert!(err < 1e-9, "{name}: {err}");
    assert_eq!(out.report.messages, vec![(6, 6); 3]);
    assert_eq!(out.report.microbatches.regular, 6);
}

#[test]
fn one_stage_is_bitwise_single_device() {
    for tie in [false, true] {
        let (model, micro, w) = setup(small_config(4, &[0, 2], tie), 2, 3, 2);
        let prog = ModelProgram::new(&model, 1).unwrap();
        for defer in [false, true] {
            let opts = IterationOptions::new(WeightSchedule::constant(w.clone())).deferred(defer);
            let out = run_iteration(&prog, &micro, &Extra::default(), &opts).unwrap();
            assert!(bitwise_equal(&out.grads, &oracle(&model, &micro, &w)), "tie={tie} defer={defer}");
        }
    }
}

#[test]
fn deferred_changes_memory_not_gradients() {
    let (model, micro, w) = setup(small_config(8, &[2, 4], false), 1, 6, 3);
    let prog = ModelProgram::new(&model, 4).unwrap();
    let opts = IterationOptions::new(WeightSchedule::constant(w));
    let eager = run_iteration(&prog, &micro, &Extra::default(), &opts).unwrap();
    let deferred = run_iteration(&prog, &micro, &Extra::default(), &opts.clone().deferred(true)).unwrap();
    assert!(bitwise_equal(&eager.grads, &deferred.grads));
    let (e, d) = (&eager.report.peak_memory, &deferred.report.peak_memory);
    let logits = (6 * 13) as f64;
    // exits on stages 2 and 3: eager holds P-i+1 logits, deferred one
    assert_eq!(e[1] - d[1], logits * 3.0 - logits);
    assert_eq!(e[2] - d[2], logits * 2.0 - logits);
    assert_eq!(e[0], d[0]);
    assert_eq!(e[3], d[3]);
}

#[test]
fn tied_model_gradients_are_synchronised() {
    let (model, micro, w) = setup(small_config(6, &[0, 2, 4], true), 2, 4, 4);
    for p in [2, 3] {
        let prog = ModelProgram::new(&model, p).unwrap();
        assert!(!prog.replicas().is_empty());
        let out = run_iteration(&prog, &micro, &Extra::default(), &IterationOptions::new(WeightSchedule::constant(w.clone()))).unwrap();
        let (name, err) = max_rel_error(&out.grads, &oracle(&model, &micro, &w));
        assert!(err < 1e-9, "P={p} {name}: {err}");
    }
}

#[test]
fn sync_tied_is_a_plain_sum() {
    use exitpipe::model::ParamMap;
    use exitpipe_tensor::Tensor;
    let t = |v: f64| Tensor::full(&[2], v);
    let s1: ParamMap = [("e".to_string(), t(1.0)), ("a".to_string(), t(5.0))].into_iter().collect();
    let s2: ParamMap = [("e".to_string(), t(2.0))].into_iter().collect();
    let s3: ParamMap = [("e".to_string(), t(4.0))].into_iter().collect();
    let reps = vec![("e".to_string(), 2), ("e".to_string(), 3)];
    let merged = sync_tied(&[s1.clone(), s2.clone(), s3], &reps).unwrap();
    assert_eq!(merged["e"], t(7.0));
    let zeroed: ParamMap = [("e".to_string(), t(0.0))].into_iter().collect();
    let less = sync_tied(&[s1.clone(), s2, zeroed], &reps).unwrap();
    assert_eq!(less["e"], t(3.0));
    assert_eq!(sync_tied(std::slice::from_ref(&s1), &[]).unwrap(), s1);
    let bad: ParamMap = [("e".to_string(), Tensor::full(&[3], 1.0))].into_iter().collect();
    assert!(sync_tied(&[s1, bad], &[("e".to_string(), 2)]).is_err());
}

#[test]
fn in_flight_bound_and_determinism() {
    let (model, micro, w) = setup(small_config(8, &[2, 4], false), 1, 7, 5);
    let prog = ModelProgram::new(&model, 4).unwrap();
    let opts = IterationOptions::new(WeightSchedule::constant(w)).deferred(true);
    let a = run_iteration(&prog, &micro, &Extra::default(), &opts).unwrap();
    let b = run_iteration(&prog, &micro, &Extra::default(), &opts).unwrap();
    assert_eq!(a.report, b.report);
    assert!(bitwise_equal(&a.grads, &b.grads));
    for (i, &n) in a.report.max_in_flight.iter().enumerate() {
        assert!(n <= 4 - i, "stage {}: {n}", i + 1);
    }
    assert_eq!(a.report.max_in_flight, vec![4, 3, 2, 1]);
}

#[test]
fn replay_matches_simulation() {
    let (model, micro, w) = setup(small_config(8, &[2, 4], false), 2, 6, 6);
    let prog = ModelProgram::new(&model, 4).unwrap();
    let opts = IterationOptions::new(WeightSchedule::constant(w)).deferred(true);
    let out = run_iteration(&prog, &micro, &Extra::default(), &opts).unwrap();
    let cost = prog.cost_model(6, &micro[0]);
    let tl = simulate(&cost, &Variant::new(ExitMode::Deferred)).unwrap();
    let rep = verify_against_replay(&tl, &out.executed);
    assert!(rep.is_clean(), "{:?}", rep.discrepancies);
    // a mis-set variant is caught
    let wrong = simulate(&cost, &Variant::new(ExitMode::DeferredReordered)).unwrap();
    assert!(!verify_against_replay(&wrong, &out.executed).is_clean());
    let eager = simulate(&cost, &Variant::new(ExitMode::Eager)).unwrap();
    assert!(!verify_against_replay(&eager, &out.executed).is_clean());
}

#[test]
fn single_stage_replay_is_trivial() {
    let (model, micro, w) = setup(small_config(2, &[1], false), 1, 2, 7);
    let prog = ModelProgram::new(&model, 1).unwrap();
    let out = run_iteration(&prog, &micro, &Extra::default(), &IterationOptions::new(WeightSchedule::constant(w))).unwrap();
    let tl = simulate(&prog.cost_model(2, &micro[0]), &Variant::new(ExitMode::Eager)).unwrap();
    assert!(verify_against_replay(&tl, &out.executed).is_clean());
}

#[test]
fn filled_replay_matches_simulation() {
    let (model, micro, w) = setup(small_config(8, &[2, 4], false), 1, 6, 8);
    let extra = random_batch(4, 6, 13, 99).split(4).unwrap();
    let prog = ModelProgram::new(&model, 4).unwrap();
    let plan = plan_bubble_fill(4, 0.5).unwrap();
    let opts = IterationOptions::new(WeightSchedule::constant(w)).deferred(true).with_fill(plan.clone());
    let out = run_iteration(&prog, &micro, &Extra { part1: &extra[..2], part2: &extra[2..] }, &opts).unwrap();
    let cost = prog.cost_model(6, &micro[0]);
    let tl = simulate(&cost, &Variant::with_fill(ExitMode::Deferred, plan)).unwrap();
    let rep = verify_against_replay(&tl, &out.executed);
    assert!(rep.is_clean(), "{:?}", rep.discrepancies);
    // no exit on stage 1, so the depth-1 Part-1 microbatch is dropped
    assert_eq!((out.report.microbatches.part1, out.report.microbatches.part2), (1, 2));
}

#[test]
fn part2_microbatch_touches_only_last_stages() {
    // B = 4, one inserted microbatch covering stages 3 and 4 (f/b = 1)
    let (model, micro, w) = setup(small_config(8, &[2, 4], false), 1, 4, 9);
    let extra = random_batch(1, 6, 13, 77).split(1).unwrap();
    let prog = ModelProgram::new(&model, 4).unwrap();
    let plan = plan_bubble_fill(4, 1.0).unwrap().only_part2();
    assert_eq!(plan.part2_backward_depth, vec![2]);
    let sched = WeightSchedule::constant(w.clone());
    let plain = run_iteration(&prog, &micro, &Extra::default(), &IterationOptions::new(sched.clone())).unwrap();
    let mut raw_opts = IterationOptions::new(sched.clone()).with_fill(plan.clone());
    raw_opts.rescale_fill = false;
    let raw = run_iteration(&prog, &micro, &Extra { part1: &[], part2: &extra }, &raw_opts).unwrap();
    let (_, inserted) = model.loss_and_grads(&extra[0], &w, 0.25).unwrap();
    let part = prog.partition();
    for (name, g) in &raw.grads {
        let stage = part.slots.iter().find(|s| &s.name == name).unwrap().stage;
        let mut diff = g.clone();
        let mut neg = plain.grads[name].clone();
        neg.scale_in_place(-1.0);
        diff.add_assign(&neg).unwrap();
        if stage <= 2 {
            assert_eq!(diff.max_abs(), 0.0, "{name}");
        } else {
            let err = diff.data().iter().zip(inserted[name].data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-9 * inserted[name].max_abs().max(1e-12), "{name}: {err}");
        }
    }
    // rescaled by 4/5: stages 3-4 hold the mean over five microbatches
    let scaled = run_iteration(&prog, &micro, &Extra { part1: &[], part2: &extra }, &IterationOptions::new(sched).with_fill(plan)).unwrap();
    let mut five = micro.clone();
    five.push(extra[0].clone());
    let mean5 = oracle(&model, &five, &w);
    for (name, g) in &scaled.grads {
        let stage = part.slots.iter().find(|s| &s.name == name).unwrap().stage;
        let want = if stage >= 3 { &mean5[name] } else { &plain.grads[name] };
        let err = g.data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-9 * want.max_abs().max(1e-12), "{name}: {err}");
    }
}

#[test]
fn empty_plan_equals_plain() {
    let (model, micro, w) = setup(small_config(4, &[2], false), 1, 4, 10);
    let prog = ModelProgram::new(&model, 4).unwrap();
    let plan = plan_bubble_fill(4, 3.0).unwrap();
    assert!(plan.is_empty());
    let sched = WeightSchedule::constant(w);
    let a = run_iteration(&prog, &micro, &Extra::default(), &IterationOptions::new(sched.clone())).unwrap();
    let b = run_iteration(&prog, &micro, &Extra::default(), &IterationOptions::new(sched).with_fill(plan)).unwrap();
    assert!(bitwise_equal(&a.grads, &b.grads));
}

#[test]
fn fill_rejected_for_tied_models() {
    let (model, micro, w) = setup(small_config(4, &[2], true), 1, 4, 11);
    let prog = ModelProgram::new(&model, 4).unwrap();
    let extra = random_batch(4, 6, 13, 5).split(4).unwrap();
    let opts = IterationOptions::new(WeightSchedule::constant(w)).with_fill(plan_bubble_fill(4, 0.5).unwrap());
    let err = run_iteration(&prog, &micro, &Extra { part1: &extra[..2], part2: &extra[2..] }, &opts).err().unwrap();
    assert!(matches!(err, Error::Fill(_)), "{err}");
}

#[test]
fn bad_inputs_surface_as_errors() {
    let (model, micro, w) = setup(small_config(4, &[2], false), 1, 2, 12);
    let prog = ModelProgram::new(&model, 2).unwrap();
    let short = IterationOptions::new(WeightSchedule::constant(vec![1.0]));
    assert!(run_iteration(&prog, &micro, &Extra::default(), &short).is_err());
    let mut bad = micro.clone();
    bad[1].targets[0] = 999;
    let err = run_iteration(&prog, &bad, &Extra::default(), &IterationOptions::new(WeightSchedule::constant(w))).err().unwrap();
    assert!(matches!(err, Error::Tensor(_)), "root cause reported: {err}");
}

#[test]
fn weight_schedule_is_evaluated_per_iteration() {
    let cfg = ModelConfig { exits: vec![ExitSpec::new(2, HeadKind::Minimalistic, 0.5)], ..small_config(4, &[], false) };
    let (model, micro, _) = setup(cfg, 1, 2, 13);
    let prog = ModelProgram::new(&model, 2).unwrap();
    let sched = WeightSchedule::Linear { start: vec![0.0, 1.0], end: vec![0.5, 1.0], span: 10 };
    let mut opts = IterationOptions::new(sched);
    opts.step = 5;
    let out = run_iteration(&prog, &micro, &Extra::default(), &opts).unwrap();
    assert_eq!(out.report.weights, vec![0.25, 1.0]);
    let want = oracle(&model, &micro, &[0.25, 1.0]);
    assert!(max_rel_error(&out.grads, &want).1 < 1e-9);
}
