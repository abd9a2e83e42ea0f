use distil_core::corpus::{prepare_sequences, synthetic, BatchStream, DataConfig, Vocabulary};
use distil_core::distill::{init_student, mlm_loss, DistillConfig};
use distil_core::encoder::encode_batch;
use distil_core::train::{
    decode_checkpoint, distill, distill_batch_loss, distill_into, encode_checkpoint, format_log,
    load_checkpoint, mlm_batch_loss, parse_log, save_checkpoint, train_mlm, train_teacher,
    Adam, OptimizerConfig, RunConfig, TrainOutcome, TrainingMeta, FORMAT_VERSION, MAGIC,
};
use distil_core::{EncoderModel, Error, ModelConfig, Tape};

fn config(layers: usize) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        hidden_size: 16,
        num_heads: 2,
        ffn_size: 32,
        vocab_size: 120,
        max_positions: 22,
        layer_norm_eps: 1e-5,
    }
}

fn stream(seed: u64) -> BatchStream {
    let docs: Vec<String> = synthetic::generate(11, 8_000).lines().map(str::to_owned).collect();
    let vocab = Vocabulary::build(&docs, 120).unwrap();
    let data = DataConfig {
        batch_size: 4,
        n_max: 16,
        ..Default::default()
    };
    let seqs = prepare_sequences(&docs, &vocab, data.n_max);
    BatchStream::new(seqs, &data, vocab.len(), 20, seed).unwrap()
}

fn teacher_run(seed: u64, steps: usize) -> TrainOutcome {
    train_teacher(&config(4), &mut stream(seed), steps, seed, &OptimizerConfig::default(), &mut |_| {}).unwrap()
}

fn meta() -> TrainingMeta {
    TrainingMeta {
        step: 3,
        seed: 9,
        loss_tail: vec![1.5, 0.25],
    }
}

#[test]
fn identical_seeds_give_identical_checkpoints_and_logs() {
    let a = teacher_run(5, 12);
    let b = teacher_run(5, 12);
    assert_eq!(format_log(&a.records), format_log(&b.records));
    assert_eq!(
        encode_checkpoint(&a.model, &a.meta(5)).unwrap(),
        encode_checkpoint(&b.model, &b.meta(5)).unwrap()
    );
    let c = teacher_run(6, 12);
    assert_ne!(format_log(&a.records), format_log(&c.records));
}

#[test]
fn log_has_one_record_per_step_plus_final() {
    let run = teacher_run(1, 7);
    let steps: Vec<usize> = run.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, (0..=7).collect::<Vec<_>>());
    let parsed = parse_log(&format_log(&run.records)).unwrap();
    for (p, r) in parsed.iter().zip(&run.records) {
        assert_eq!(p.step, r.step);
        assert_eq!(p.loss.total, r.loss.total);
    }
}

#[test]
fn final_log_value_replays_from_saved_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("teacher.ckpt");
    let run = teacher_run(2, 10);
    save_checkpoint(&run.model, &run.meta(2), &path).unwrap();
    let logged = parse_log(&format_log(&run.records)).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let replay = mlm_batch_loss(&loaded.model, &run.last_batch).unwrap();
    assert!((replay.total - logged.last().unwrap().loss.total).abs() < 1e-5);

    let cfg = DistillConfig::default();
    let student = distill(&loaded.model, &cfg.student_config(&loaded.model.config), &mut stream(3), 6, &cfg, &OptimizerConfig::default(), &mut |_| {}).unwrap();
    let replay = distill_batch_loss(&student.model, &loaded.model, &student.last_batch, &cfg).unwrap();
    assert!((replay.total - student.records.last().unwrap().loss.total).abs() < 1e-5);
}

#[test]
fn zero_steps_is_rejected() {
    let err = train_teacher(&config(2), &mut stream(0), 0, 0, &OptimizerConfig::default(), &mut |_| {}).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn training_preserves_shapes_and_count() {
    let before = EncoderModel::init_random(&config(4), 0).unwrap().audit();
    let run = teacher_run(0, 5);
    assert_eq!(run.model.audit(), before);
    run.model.verify_layout().unwrap();
}

#[test]
fn teacher_overfits_a_single_batch() {
    let batch = stream(4).next_batch().unwrap();
    let mut model = EncoderModel::init_random(&config(2), 0).unwrap();
    let initial = mlm_batch_loss(&model, &batch).unwrap().total;
    let hyper = OptimizerConfig {
        learning_rate: 3e-3,
        ..Default::default()
    };
    let mut adam = Adam::new(&model, &hyper, 300).unwrap();
    for _ in 0..300 {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let out = encode_batch(&mut tape, &bound, &batch.sequences()).unwrap();
        let loss = mlm_loss(&mut tape, out.log_probs, &batch).unwrap();
        tape.backward(loss).unwrap();
        model.accumulate_grads(&tape, &bound);
        adam.step(&mut model).unwrap();
    }
    let last = mlm_batch_loss(&model, &batch).unwrap().total;
    assert!(last < 0.2 * initial, "{initial} -> {last}");
}

#[test]
fn copied_layers_start_closer_than_random_student() {
    let teacher = teacher_run(7, 40).model;
    let cfg = DistillConfig::default();
    let scfg = cfg.student_config(&teacher.config);
    let copied = init_student(&teacher, &scfg, 2).unwrap();
    let random = EncoderModel::init_random(&scfg, 7).unwrap();
    let batch = stream(8).next_batch().unwrap();
    let a = distill_batch_loss(&copied, &teacher, &batch, &cfg).unwrap();
    let b = distill_batch_loss(&random, &teacher, &batch, &cfg).unwrap();
    assert!(a.soft_label < b.soft_label);
    assert!(a.cosine < b.cosine);
}

#[test]
fn zero_alpha_beta_is_plain_mlm() {
    let teacher = teacher_run(3, 4).model;
    let cfg = DistillConfig {
        alpha: 0.0,
        beta: 0.0,
        gamma: 1.0,
        ..Default::default()
    };
    let scfg = cfg.student_config(&teacher.config);
    let student = init_student(&teacher, &scfg, 2).unwrap();
    let hyper = OptimizerConfig::default();
    let a = distill_into(student.clone(), &teacher, &mut stream(9), 5, &cfg, &hyper, &mut |_| {}).unwrap();
    let b = train_mlm(student, &mut stream(9), 5, &hyper, &mut |_| {}).unwrap();
    assert!(a.model.bit_eq(&b.model));
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(x.loss.total, y.loss.mlm);
    }
}

#[test]
fn teacher_is_untouched_by_distillation() {
    let teacher = teacher_run(4, 3).model;
    let snapshot = teacher.clone();
    let cfg = DistillConfig::default();
    distill(&teacher, &cfg.student_config(&teacher.config), &mut stream(1), 20, &cfg, &OptimizerConfig::default(), &mut |_| {}).unwrap();
    assert!(teacher.bit_eq(&snapshot));
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let model = EncoderModel::init_random(&config(3), 12).unwrap();
    let first = dir.path().join("a.ckpt");
    let second = dir.path().join("b.ckpt");
    let digest = save_checkpoint(&model, &meta(), &first).unwrap();
    let loaded = load_checkpoint(&first).unwrap();
    assert_eq!(loaded.digest, digest);
    assert_eq!(loaded.version, FORMAT_VERSION);
    assert_eq!(loaded.meta, meta());
    assert!(loaded.model.bit_eq(&model));
    save_checkpoint(&loaded.model, &loaded.meta, &second).unwrap();
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
}

#[test]
fn teacher_checkpoint_seeds_a_student() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    let teacher = EncoderModel::init_random(&config(4), 1).unwrap();
    save_checkpoint(&teacher, &meta(), &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap().model;
    let student = init_student(&loaded, &config(2), 2).unwrap();
    assert!(student.layers[1].query.weight.bit_eq(&teacher.layers[2].query.weight));
}

fn assert_integrity(bytes: &[u8]) -> u64 {
    match decode_checkpoint(bytes) {
        Err(Error::Integrity { offset, .. }) => offset,
        other => panic!("expected integrity error, got {other:?}"),
    }
}

#[test]
fn every_payload_byte_flip_is_detected() {
    let model = EncoderModel::init_random(&config(1), 3).unwrap();
    let bytes = encode_checkpoint(&model, &meta()).unwrap();
    let manifest_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let payload = 16 + manifest_len..bytes.len() - 8;
    for i in payload.step_by(97) {
        let mut bad = bytes.clone();
        bad[i] ^= 0x10;
        assert!(decode_checkpoint(&bad).is_err(), "flip at {i} undetected");
    }
}

#[test]
fn digest_mismatch_reports_trailer_offset() {
    let model = EncoderModel::init_random(&config(1), 3).unwrap();
    let mut bytes = encode_checkpoint(&model, &meta()).unwrap();
    let n = bytes.len();
    bytes[n - 20] ^= 1;
    assert_eq!(assert_integrity(&bytes), (n - 8) as u64);
}

#[test]
fn header_corruption_is_reported() {
    let model = EncoderModel::init_random(&config(1), 3).unwrap();
    let bytes = encode_checkpoint(&model, &meta()).unwrap();
    assert_eq!(&bytes[..8], MAGIC);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(assert_integrity(&bad), 0);

    let mut bad = bytes.clone();
    bad[8..12].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(
        decode_checkpoint(&bad),
        Err(Error::Version { found: 2, expected: 1 })
    ));

    assert_eq!(assert_integrity(&bytes[..bytes.len() - 3]), (bytes.len() - 3) as u64);
    assert_eq!(assert_integrity(&bytes[..10]), 10);

    let mut longer = bytes.clone();
    longer.push(0);
    assert_eq!(assert_integrity(&longer), bytes.len() as u64);
}

#[test]
fn missing_checkpoint_names_the_path() {
    let err = load_checkpoint(std::path::Path::new("/nonexistent/x.ckpt")).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/x.ckpt"));
}

#[test]
fn run_config_round_trips_through_toml() {
    let mut cfg = RunConfig::new(config(4));
    cfg.seed = 17;
    cfg.data.n_max = 20;
    cfg.distill.alpha = 0.6;
    cfg.distill.beta = 0.2;
    let text = cfg.to_toml();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
}
