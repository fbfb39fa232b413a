use evfuse::checkpoint;
use evfuse::config::Config;
use evfuse::datagen::{generate, ScenarioConfig};
use evfuse::model::{LossWeights, ModelConfig, Prepared, Stage};
use evfuse::pipeline::{fresh_state, run_training};
use evfuse::trainer::{train, StageData, ENCODERS};
use evfuse::{ErrorClass, Tape};

fn tiny_config(seed: u64) -> Config {
    let mut cfg = Config {
        seed,
        scenario: ScenarioConfig {
            num_events: 60,
            lookback: 6,
            horizon: 6,
            vocab: 32,
            script_len_min: 3,
            script_len_max: 6,
            signal_tokens: 4,
            planted: 2,
            seed,
            ..ScenarioConfig::default()
        },
        model: ModelConfig::micro(),
        ..Config::default()
    };
    cfg.train.batch_size = 8;
    cfg.train.learning_rate = 3e-3;
    cfg
}

#[test]
fn every_stage_audit_passes() {
    let cfg = tiny_config(1);
    let run = run_training(&cfg, generate(&cfg.scenario).unwrap(), None, &Stage::ALL, None).unwrap();
    for stage in 1..=3 {
        let audits: Vec<_> = run.log.audits.iter().filter(|a| a.stage == stage).collect();
        assert!(!audits.is_empty(), "stage {stage} has no audit");
        assert!(audits.iter().all(|a| a.unchanged));
    }
    let groups = |stage: usize| -> Vec<&str> {
        run.log
            .audits
            .iter()
            .filter(|a| a.stage == stage && a.epoch == 1)
            .map(|a| a.group)
            .collect()
    };
    assert_eq!(
        groups(1),
        ["text_projection", "cross_attention", "alignment", "gate", ENCODERS]
    );
    assert_eq!(
        groups(2),
        ["ts_projection", "cross_attention", "alignment", "gate", ENCODERS]
    );
    assert_eq!(groups(3), [ENCODERS]);
    assert_eq!(run.state.progress, [2, 2, 2]);
}

#[test]
fn logged_total_is_weighted_sum() {
    let cfg = tiny_config(2);
    let run = run_training(&cfg, generate(&cfg.scenario).unwrap(), None, &Stage::ALL, None).unwrap();
    let (la, lg) = (cfg.train.lambda_align, cfg.train.lambda_gate);
    let mm: Vec<_> = run.log.steps.iter().filter(|r| r.stage == 3).collect();
    assert!(!mm.is_empty());
    for r in mm {
        let expect = r.l_forecast + la * (r.l_ctr + r.l_tok) + lg * r.l_gate;
        assert!((r.l_total - expect).abs() <= 1e-12 * expect.abs().max(1.0), "{r:?}");
        assert!((0.0..=1.0).contains(&r.mean_alpha));
    }
    for r in run.log.steps.iter().filter(|r| r.stage < 3) {
        assert!(r.l_ctr.is_nan() && r.l_gate.is_nan());
        assert_eq!(r.l_total, r.l_forecast);
    }
}

#[test]
fn zero_weights_reduce_to_forecast() {
    let cfg = tiny_config(3);
    let data = generate(&cfg.scenario).unwrap();
    let state = fresh_state(&cfg, &data).unwrap();
    let model = &state.model;
    let prepared = model.prepare_all(&data[..4]).unwrap();
    let refs: Vec<&Prepared> = prepared.iter().collect();
    let zero = LossWeights { align: 0.0, gate: 0.0 };

    let mut tape = Tape::with_params(&model.store);
    let pass = model.multimodal(&mut tape, &refs, zero, None).unwrap();
    assert_eq!(tape.item(pass.losses.total), tape.item(pass.losses.forecast));
    let g_total = tape.backward(pass.losses.total);

    let mut tape = Tape::with_params(&model.store);
    let pass = model.multimodal(&mut tape, &refs, zero, None).unwrap();
    let g_forecast = tape.backward(pass.losses.forecast);
    for id in model.store.ids() {
        // an absent gradient and an all-zero one are the same update
        let dense = |g: Option<&[f64]>| {
            g.map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; model.store.get(id).value.len()])
        };
        assert_eq!(
            dense(g_total.param(id)),
            dense(g_forecast.param(id)),
            "{}",
            model.store.get(id).name
        );
    }
}

#[test]
fn resume_matches_uninterrupted_bitwise() {
    let cfg = tiny_config(4);
    let data = generate(&cfg.scenario).unwrap();
    let full = run_training(&cfg, data.clone(), None, &Stage::ALL, None).unwrap();

    let mut log_steps = Vec::new();
    let mut state = None;
    for _ in 0..6 {
        let run = run_training(&cfg, data.clone(), state, &Stage::ALL, Some(1)).unwrap();
        log_steps.extend(run.log.steps);
        // through bytes, as a resumed process would see it
        let bytes = checkpoint::to_bytes(&run.state).unwrap();
        state = Some(checkpoint::from_bytes(&bytes).unwrap());
    }
    let resumed = state.unwrap();
    assert_eq!(resumed.progress, [2, 2, 2]);
    assert_eq!(
        checkpoint::to_bytes(&resumed).unwrap(),
        checkpoint::to_bytes(&full.state).unwrap()
    );
    let bits = |v: &[evfuse::trainer::StepRecord]| -> Vec<u64> { v.iter().map(|r| r.l_total.to_bits()).collect() };
    assert_eq!(bits(&log_steps), bits(&full.log.steps));
}

#[test]
fn skipping_stages_is_recorded() {
    let cfg = tiny_config(5);
    let run = run_training(&cfg, generate(&cfg.scenario).unwrap(), None, &[Stage::Multimodal], None).unwrap();
    assert_eq!(run.state.progress, [0, 0, 2]);
    let t = &run.state.transitions[0];
    assert_eq!((t.from, t.to), (Stage::TsOnly, Stage::Multimodal));
    assert_eq!(t.skipped, vec![Stage::TsOnly, Stage::TextOnly]);
}

#[test]
fn validation_loss_falls_during_pretraining() {
    let mut cfg = tiny_config(6);
    cfg.train.stage_epochs = [4, 0, 0];
    let run = run_training(&cfg, generate(&cfg.scenario).unwrap(), None, &[Stage::TsOnly], None).unwrap();
    let v = &run.log.validation;
    assert_eq!(v.len(), 5);
    assert_eq!(v[0].epoch, 0);
    assert!(v[4].l_forecast < v[0].l_forecast, "{v:?}");
}

#[test]
fn batches_cover_training_set_once_per_epoch() {
    let cfg = tiny_config(7);
    let data = generate(&cfg.scenario).unwrap();
    let mut state = fresh_state(&cfg, &data).unwrap();
    let splits = evfuse::datagen::split(data, &cfg.split).unwrap();
    let sd = StageData::build(&state.model, &splits.train, &splits.val, 1).unwrap();
    let mut tcfg = cfg.train;
    tcfg.stage_epochs = [0, 0, 1];
    let mut log = Default::default();
    train(&mut state, &sd, &tcfg, &[Stage::Multimodal], &mut log, None).unwrap();
    let mut ids: Vec<u64> = log.last_outcomes.iter().map(|(id, _)| *id).collect();
    ids.sort_unstable();
    let mut want: Vec<u64> = splits.train.iter().map(|i| i.id).collect();
    want.sort_unstable();
    assert_eq!(ids, want);
}

#[test]
fn multimodal_needs_two_instances() {
    let cfg = tiny_config(8);
    let data = generate(&cfg.scenario).unwrap();
    let mut state = fresh_state(&cfg, &data).unwrap();
    let sd = StageData::build(&state.model, &data[..1], &data[1..3], 1).unwrap();
    let mut log = Default::default();
    let err = train(&mut state, &sd, &cfg.train, &[Stage::Multimodal], &mut log, None).unwrap_err();
    assert_eq!(err.class(), ErrorClass::Usage);
}
