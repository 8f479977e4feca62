use msct_core::dgp::{build_benchmark, sliding_strategies, DgpConfig, SplitSizes};
use msct_core::layers::ForwardCtx;
use msct_core::model::*;
use msct_core::tensor::{Graph, Tensor};
use msct_core::MsctError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn data(n: usize, seq_len: usize) -> Vec<Sequence> {
    let cfg = DgpConfig {
        seq_len,
        ..DgpConfig::default()
    };
    let b = build_benchmark(&cfg, SplitSizes { train: n, val: 1, test: 1 }).unwrap();
    sequences(&b.train, TreatmentField::Binary, 2).unwrap()
}

fn small_cfg(backbone: Backbone) -> MsctConfig {
    MsctConfig {
        d_h: 8,
        heads: 2,
        backbone,
        ..MsctConfig::default()
    }
}

fn random_model(cfg: MsctConfig, seed: u64, seqs: &[Sequence]) -> MsctModel {
    let mut m = MsctModel::new(cfg, seed).unwrap();
    m.norm = Normalizer::fit(seqs).unwrap();
    m
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

struct EncVals {
    phi: Tensor,
    y: Tensor,
    ps: Tensor,
    hps: Tensor,
}

fn encode(m: &MsctModel, batch: &EncoderBatch) -> EncVals {
    let mut g = Graph::new();
    let o = m
        .encoder
        .forward(&mut g, &m.store, batch, HpsInput::Plain, &mut ForwardCtx::eval())
        .unwrap();
    EncVals {
        phi: g.value(o.phi).clone(),
        y: g.value(o.y_hat).clone(),
        ps: g.value(o.ps_probs.unwrap()).clone(),
        hps: g.value(o.hps_probs.unwrap()).clone(),
    }
}

/// Values at positions `0..=p` of a `[B, L, ..]` tensor.
fn upto(t: &Tensor, p: usize) -> Vec<u64> {
    let (b, l) = (t.shape()[0], t.shape()[1]);
    let w = t.len() / (b * l);
    let mut out = Vec::new();
    for i in 0..b {
        let start = i * l * w;
        out.extend(t.data()[start..start + (p + 1) * w].iter().map(|v| v.to_bits()));
    }
    out
}

#[test]
fn encoder_outputs_ignore_later_inputs() {
    let seqs = data(4, 16);
    let refs: Vec<&Sequence> = seqs.iter().collect();
    let mut cases = 0;
    for backbone in [Backbone::Transformer, Backbone::Lstm] {
        let m = random_model(small_cfg(backbone), 3, &seqs);
        let base = EncoderBatch::build(&refs, &m.norm, 2).unwrap();
        let l = base.len();
        let reference = encode(&m, &base);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            let p = rng.random_range(0..l - 1);
            let mut perturbed = base.clone();
            let (b, d_in, k) = (base.batch(), base.inputs.shape()[2], 2);
            for i in 0..b {
                for q in p + 1..l {
                    for c in 0..d_in {
                        let v = perturbed.inputs.get(&[i, q, c]);
                        perturbed.inputs.set(&[i, q, c], v + rng.random_range(-3.0..3.0));
                    }
                    let flip = rng.random_range(0..k);
                    for c in 0..k {
                        perturbed.treat_in.set(&[i, q, c], if c == flip { 1.0 } else { 0.0 });
                        perturbed.treat_next.set(&[i, q, c], if c != flip { 1.0 } else { 0.0 });
                    }
                }
            }
            let out = encode(&m, &perturbed);
            assert_eq!(upto(&out.phi, p), upto(&reference.phi, p), "phi at p={p} ({backbone:?})");
            assert_eq!(upto(&out.y, p), upto(&reference.y, p));
            assert_eq!(upto(&out.ps, p), upto(&reference.ps, p));
            assert_eq!(upto(&out.hps, p), upto(&reference.hps, p));
            assert_ne!(bits(&out.phi), bits(&reference.phi), "perturbation had no effect");
            cases += 1;
        }
    }
    assert!(cases >= 50);
}

#[test]
fn encoder_shapes_and_probabilities() {
    let seqs = data(3, 12);
    let refs: Vec<&Sequence> = seqs.iter().collect();
    for k in [2, 4] {
        let cfg = MsctConfig { k, ..small_cfg(Backbone::Transformer) };
        let m = random_model(cfg, 1, &seqs);
        let batch = EncoderBatch::build(&refs, &m.norm, k).unwrap();
        let out = encode(&m, &batch);
        assert_eq!(out.phi.shape(), &[3, 11, 8]);
        assert_eq!(out.y.shape(), &[3, 11]);
        for probs in [&out.ps, &out.hps] {
            assert_eq!(probs.shape(), &[3, 11, k]);
            for row in probs.data().chunks(k) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&p| p > 0.0));
            }
        }
    }
}

#[test]
fn misaligned_inputs_are_shape_errors() {
    let seqs = data(2, 12);
    let mut short = seqs[1].clone();
    short.y.pop();
    short.t.pop();
    short.x.pop();
    let refs = vec![&seqs[0], &short];
    assert!(matches!(
        EncoderBatch::build(&refs, &Normalizer::default(), 2),
        Err(MsctError::Shape { .. })
    ));
    let m = random_model(small_cfg(Backbone::Transformer), 0, &seqs);
    let refs: Vec<&Sequence> = seqs.iter().collect();
    let batch = EncoderBatch::build(&refs, &m.norm, 2).unwrap();
    let cfg4 = MsctConfig { k: 4, ..small_cfg(Backbone::Transformer) };
    let m4 = MsctModel::new(cfg4, 0).unwrap();
    let mut g = Graph::new();
    let r = m4.encoder.forward(&mut g, &m4.store, &batch, HpsInput::Plain, &mut ForwardCtx::eval());
    assert!(matches!(r, Err(MsctError::Shape { .. })));
}

#[test]
fn config_invariants_are_enforced() {
    for bad in [
        MsctConfig { blocks: 0, ..MsctConfig::default() },
        MsctConfig { k: 1, ..MsctConfig::default() },
        MsctConfig { tau_max: 1, ..MsctConfig::default() },
    ] {
        assert!(matches!(MsctModel::new(bad, 0), Err(MsctError::Config(_))));
    }
}

#[test]
fn groups_partition_every_parameter() {
    for (ps, hps, backbone) in [
        (true, true, Backbone::Transformer),
        (true, true, Backbone::Lstm),
        (false, true, Backbone::Transformer),
        (false, false, Backbone::Transformer),
    ] {
        let cfg = MsctConfig {
            ps_pathway: ps,
            hps_head: hps,
            ..small_cfg(backbone)
        };
        let m = MsctModel::new(cfg, 0).unwrap();
        let mut seen = vec![0usize; m.store.len()];
        for stage in [Stage::Encoder, Stage::Decoder] {
            for grp in GROUPS {
                for id in m.params_in(stage, &[grp]) {
                    seen[id.0] += 1;
                }
            }
        }
        assert!(seen.iter().all(|&c| c == 1), "each parameter in exactly one group");
        let total: usize = m.group_sizes().values().sum();
        assert_eq!(total, m.store.num_scalars());
        for stage in [Stage::Encoder, Stage::Decoder] {
            assert_eq!(m.has_group(stage, Group::Ps), ps);
            assert_eq!(m.has_group(stage, Group::T), ps);
            assert_eq!(m.has_group(stage, Group::Hps), hps);
            assert!(m.has_group(stage, Group::R) && m.has_group(stage, Group::Y));
        }
        for id in m.store.ids() {
            let name = m.store.name(id);
            let (stage, grp) = m.group_of(id);
            assert_eq!(name.starts_with("enc."), stage == Stage::Encoder, "{name}");
            if name.contains(".ps_") || name.contains("memory") {
                assert!(matches!(grp, Group::T | Group::Ps), "{name}");
            }
            if name.contains("hps_head") {
                assert_eq!(grp, Group::Hps);
            }
            if name.contains("y_head") {
                assert_eq!(grp, Group::Y);
            }
        }
    }
}

#[test]
fn eval_mode_is_bitwise_deterministic() {
    let seqs = data(3, 14);
    let refs: Vec<&Sequence> = seqs.iter().collect();
    let m = random_model(small_cfg(Backbone::Transformer), 5, &seqs);
    let batch = EncoderBatch::build(&refs, &m.norm, 2).unwrap();
    let (a, b) = (encode(&m, &batch), encode(&m, &batch));
    assert_eq!(bits(&a.phi), bits(&b.phi));
    assert_eq!(bits(&a.y), bits(&b.y));
    let strategies = sliding_strategies(3);
    let cfg = MsctConfig { tau_max: 3, ..small_cfg(Backbone::Transformer) };
    let m = random_model(cfg, 5, &seqs);
    let p1 = m.predict_counterfactual(&seqs[0], 6, &strategies).unwrap();
    let p2 = m.predict_counterfactual(&seqs[0], 6, &strategies).unwrap();
    assert_eq!(p1, p2);
}

#[test]
fn rollout_shapes_and_errors() {
    let seqs = data(2, 14);
    let m = random_model(small_cfg(Backbone::Transformer), 2, &seqs);
    let strategies = sliding_strategies(5);
    let paths = m.predict_counterfactual(&seqs[0], 4, &strategies).unwrap();
    assert_eq!(paths.paths.len(), 6);
    assert!(paths.paths.iter().all(|p| p.len() == 6));
    assert_eq!(paths.labels.last().unwrap(), "zero");
    assert_eq!(sliding_strategies(2).len(), 3);

    let same = vec![strategies[1].clone(), strategies[1].clone()];
    let p = m.predict_counterfactual(&seqs[0], 4, &same).unwrap();
    assert_eq!(p.paths[0], p.paths[1]);

    let long = sliding_strategies(6);
    assert!(matches!(m.predict_counterfactual(&seqs[0], 4, &long), Err(MsctError::Range(_))));
    assert!(matches!(m.predict_counterfactual(&seqs[0], 40, &strategies), Err(MsctError::Range(_))));
}

#[test]
fn outcome_head_reacts_to_the_next_treatment() {
    let seqs = data(2, 14);
    let m = random_model(small_cfg(Backbone::Transformer), 4, &seqs);
    let cache = m.encode_all(&[&seqs[0]]).unwrap().remove(0);
    let step = |next| DecoderStep {
        treat: 0,
        y_lag: 0.1,
        y_prev: 0.2,
        next_treat: next,
        target: 0.0,
    };
    let run = |next| {
        let batch = DecoderBatch::from_steps(&[(&cache, seqs[0].s.as_slice(), 5, vec![step(next)])], 2).unwrap();
        let mut g = Graph::new();
        let o = m
            .decoder
            .as_ref()
            .unwrap()
            .forward(&mut g, &m.store, &batch, HpsInput::Plain, &mut ForwardCtx::eval())
            .unwrap();
        g.value(o.y_hat).item()
    };
    assert_ne!(run(0).to_bits(), run(1).to_bits());
}

fn decode_values(m: &MsctModel, batch: &DecoderBatch) -> Tensor {
    let mut g = Graph::new();
    let o = m
        .decoder
        .as_ref()
        .unwrap()
        .forward(&mut g, &m.store, batch, HpsInput::Plain, &mut ForwardCtx::eval())
        .unwrap();
    g.value(o.y_hat).clone()
}

#[test]
fn decoder_reads_only_the_history_up_to_its_anchor() {
    let seqs = data(2, 16);
    let m = random_model(small_cfg(Backbone::Transformer), 6, &seqs);
    let caches = m.encode_all(&seqs.iter().collect::<Vec<_>>()).unwrap();
    let anchor = 5;
    let items = [(&seqs[0], &caches[0], anchor), (&seqs[1], &caches[1], anchor + 2)];
    let base = DecoderBatch::teacher_forced(&items, &m.norm, 2, 5).unwrap();
    let reference = decode_values(&m, &base);
    let mut perturbed = base.clone();
    let (l, d_h) = (base.phi.shape()[1], base.phi.shape()[2]);
    for b in 0..2 {
        for p in base.anchors[b] + 1..l {
            for c in 0..d_h {
                let v = perturbed.phi.get(&[b, p, c]);
                perturbed.phi.set(&[b, p, c], v + 1.0);
            }
        }
    }
    assert_eq!(bits(&decode_values(&m, &perturbed)), bits(&reference));

    // Later decoder steps never influence earlier ones.
    let mut later = base.clone();
    for c in 0..later.inputs.shape()[2] {
        let v = later.inputs.get(&[0, 3, c]);
        later.inputs.set(&[0, 3, c], v - 2.0);
    }
    let out = decode_values(&m, &later);
    for j in 0..3 {
        assert_eq!(out.get(&[0, j]).to_bits(), reference.get(&[0, j]).to_bits());
    }
    assert_ne!(out.get(&[0, 3]).to_bits(), reference.get(&[0, 3]).to_bits());
}

#[test]
fn zero_cross_attention_values_detach_the_representation() {
    let seqs = data(2, 16);
    let mut m = random_model(small_cfg(Backbone::Transformer), 7, &seqs);
    for block in m.decoder.clone().unwrap().blocks {
        let wv = block.cross_attn.wv;
        let shape = m.store.get(wv).shape().to_vec();
        m.store.set(wv, Tensor::zeros(&shape)).unwrap();
    }
    let caches = m.encode_all(&seqs.iter().collect::<Vec<_>>()).unwrap();
    let base = DecoderBatch::teacher_forced(&[(&seqs[0], &caches[0], 4)], &m.norm, 2, 5).unwrap();
    let mut shifted = base.clone();
    for v in shifted.phi.data_mut() {
        *v = *v * -3.0 + 1.0;
    }
    assert_eq!(bits(&decode_values(&m, &shifted)), bits(&decode_values(&m, &base)));
}

#[test]
fn cache_matches_recomputation_and_prefixes() {
    let seqs = data(3, 18);
    let refs: Vec<&Sequence> = seqs.iter().collect();
    for backbone in [Backbone::Transformer, Backbone::Lstm] {
        let m = random_model(small_cfg(backbone), 8, &seqs);
        let a = m.encode_all(&refs).unwrap();
        let b = m.encode_all(&refs).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].phi.shape(), &[17, 8]);
        let cut = 9;
        let prefixes: Vec<Sequence> = seqs
            .iter()
            .map(|s| Sequence {
                x: s.x[..cut * s.d_x].to_vec(),
                d_x: s.d_x,
                t: s.t[..cut].to_vec(),
                y: s.y[..cut].to_vec(),
                s: s.s.clone(),
            })
            .collect();
        let short = m.encode_all(&prefixes.iter().collect::<Vec<_>>()).unwrap();
        for (full, part) in a.iter().zip(&short) {
            assert_eq!(part.len(), cut - 1);
            for (x, y) in part.phi.data().iter().zip(full.phi.data()) {
                assert!((x - y).abs() <= 1e-12);
            }
            for (x, y) in part.y_hat.iter().zip(&full.y_hat) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let seqs = data(2, 14);
    for backbone in [Backbone::Transformer, Backbone::Lstm] {
        let m = random_model(small_cfg(backbone), 11, &seqs);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &m, "abc123", &[3, 4]).unwrap();
        let (back, header) = load_checkpoint(&path).unwrap();
        assert_eq!(header.train_config_hash, "abc123");
        assert_eq!(header.epochs, vec![3, 4]);
        assert_eq!(back.cfg, m.cfg);
        assert_eq!(back.norm.mean.to_bits(), m.norm.mean.to_bits());
        for id in m.store.ids() {
            assert_eq!(back.store.name(id), m.store.name(id));
            assert_eq!(bits(back.store.get(id)), bits(m.store.get(id)));
            assert_eq!(back.group_of(id), m.group_of(id));
        }
        let strategies = sliding_strategies(5);
        assert_eq!(
            back.predict_counterfactual(&seqs[1], 3, &strategies).unwrap(),
            m.predict_counterfactual(&seqs[1], 3, &strategies).unwrap()
        );
        let bytes = m.to_checkpoint_bytes("h", &[]).unwrap();
        assert_eq!(back.to_checkpoint_bytes("h", &[]).unwrap(), bytes);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(MsctModel::from_checkpoint_bytes(&bad).is_err());
        assert!(MsctModel::from_checkpoint_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
