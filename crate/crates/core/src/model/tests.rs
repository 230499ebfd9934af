use super::*;
use crate::corpus::{Corpus, CorpusManifest, SplitSizes, Task};
use crate::numerics::Group;

fn corpus() -> Corpus {
    Corpus::build(&CorpusManifest {
        asr: SplitSizes {
            train: 4,
            dev: 2,
            test: 2,
        },
        s2tt: SplitSizes {
            train: 2,
            dev: 2,
            test: 2,
        },
        ..CorpusManifest::default()
    })
    .unwrap()
}

fn model() -> SlmModel {
    SlmModel::new(ModelConfig::default(), 0).unwrap()
}

#[test]
fn groups_partition_all_params() {
    let m = model();
    let [e, a, l] = m.group_sizes();
    assert_eq!(e + a + l, m.params.len());
    assert!(e > 0 && a > 0 && l > 0);
    for (_, p) in m.params.iter() {
        let prefix = p.name().split('.').next().unwrap();
        assert_eq!(prefix, p.group().as_str());
    }
    assert_eq!(m.params.ids_in_group(Group::Adapter).len(), a);
}

#[test]
fn adapter_layer_count_is_fixed() {
    let c = ModelConfig {
        adapter_layers: 3,
        ..ModelConfig::default()
    };
    assert!(matches!(SlmModel::new(c, 0), Err(Error::Validation { .. })));
}

#[test]
fn default_vocab_covers_corpus() {
    let c = corpus();
    ModelConfig::default().check_vocab(&c.vocab).unwrap();
    let small = ModelConfig {
        vocab: 100,
        ..ModelConfig::default()
    };
    assert!(small.check_vocab(&c.vocab).is_err());
}

#[test]
fn initial_loss_near_log_vocab() {
    let c = corpus();
    let m = model();
    let ln_v = (m.config.vocab as f32).ln();
    for u in c.split(crate::corpus::Split::Train) {
        let l = m.compute_loss(&u.features, u.instruction, &with_eos(&u.target_tokens(&c.vocab))).unwrap();
        assert!((l - ln_v).abs() < 0.05 * ln_v, "{l} vs {ln_v}");
    }
}

#[test]
fn encoder_and_adapter_shapes() {
    let m = model();
    let f = Tensor::from_fn(&[1, 16], |i| i as f32 * 0.1);
    assert_eq!(m.encode_speech(&f).unwrap().shape(), &[1, 64]);
    let f = Tensor::from_fn(&[10, 16], |i| (i as f32).sin());
    let x = m.encode_speech(&f).unwrap();
    assert_eq!(m.adapt(&x).unwrap().shape(), &[5, 64]);
    let long = Tensor::<f32>::zeros(&[49, 16]);
    assert!(matches!(m.encode_speech(&long), Err(Error::Length { len: 49, max: 48 })));
}

#[test]
fn encoder_mixes_frames() {
    let m = model();
    let f = Tensor::from_fn(&[6, 16], |i| (i as f32 * 0.37).cos());
    let mut g = f.clone();
    g.data_mut()[3 * 16 + 2] += 1.0;
    let (a, b) = (m.encode_speech(&f).unwrap(), m.encode_speech(&g).unwrap());
    let changed = (0..6).filter(|&r| a.row(r) != b.row(r)).count();
    assert!(changed >= 1);
}

#[test]
fn loss_ignores_masked_padding() {
    let c = corpus();
    let m = model();
    let u = &c.mono.train[0];
    let targets = with_eos(&u.target_tokens(&c.vocab));
    let run = |pad| {
        let mut tape = Tape::new();
        let b = m.bind_frozen(&mut tape);
        let l = m.compute_loss_on(&mut tape, &b, &u.features, u.instruction, &targets, pad).unwrap();
        tape.scalar(l)
    };
    let base = run(0);
    for pad in [1, 3] {
        assert!((run(pad) - base).abs() <= 1e-6 * base.abs(), "{} vs {base}", run(pad));
    }
}

#[test]
fn assembled_mask_covers_targets_only() {
    let a = AssembledInput::new(5, 3, &[10, 11, EOS], 2).unwrap();
    assert_eq!(a.seq_len(), 5 + 1 + 3 + 2);
    assert_eq!(a.text, vec![3, 10, 11, EOS, PAD, PAD]);
    let want: Vec<bool> = (0..11).map(|p| (6..9).contains(&p)).collect();
    assert_eq!(a.loss_mask, want);
    assert!(matches!(AssembledInput::new(5, 3, &[], 0), Err(Error::DegenerateBatch(_))));
}

#[test]
fn speech_and_instruction_positions_receive_gradient() {
    let c = corpus();
    let mut m = model();
    m.params.set_all_trainable(true);
    let u = &c.cross.train[0];
    assert_eq!(u.task, Task::S2tt);
    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape);
    let l = m
        .compute_loss_on(&mut tape, &b, &u.features, u.instruction, &with_eos(&u.target_tokens(&c.vocab)), 0)
        .unwrap();
    let g = tape.backward(l).unwrap();
    m.params.accumulate(&g, &b, 1.0);
    let d = m.config.d_model;
    let eg = m.params.get(m.embed_id()).tensor.grad().unwrap();
    assert!(eg[u.instruction * d..(u.instruction + 1) * d].iter().any(|&v| v != 0.0));
    for id in m.params.ids_in_group(Group::Adapter) {
        assert!(m.params.get(id).tensor.grad().is_some());
    }
}

#[test]
fn cached_decode_matches_reference() {
    let c = corpus();
    let m = model();
    for u in c.split(crate::corpus::Split::Test) {
        let a = m.greedy_decode(&u.features, u.instruction, 12).unwrap();
        let b = m.greedy_decode_reference(&u.features, u.instruction, 12).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, m.greedy_decode(&u.features, u.instruction, 12).unwrap());
    }
}

#[test]
fn peaked_logits_decode_until_end_marker() {
    let script = [5usize, 2, EOS, 9];
    let out = decode::greedy_from_logits::<f32>(10, |prefix| {
        let mut l = vec![0.0; 16];
        l[script[prefix.len()]] = 50.0;
        Ok(l)
    })
    .unwrap();
    assert_eq!(out.tokens, vec![5, 2]);
    assert!(!out.truncated);
    let out = decode::greedy_from_logits::<f32>(1, |_| Ok(vec![0.0, 0.0, 1.0])).unwrap();
    assert_eq!(out, Decoded { tokens: vec![2], truncated: true });
}

#[test]
fn ties_go_to_lowest_id() {
    let out = decode::greedy_from_logits::<f32>(2, |p| {
        let mut l = vec![0.0; 8];
        if p.is_empty() {
            l[4] = 1.0;
            l[6] = 1.0;
        } else {
            l[1] = 3.0;
            l[0] = 3.0;
        }
        Ok(l)
    })
    .unwrap();
    // PAD (0) ties with EOS (1) and wins.
    assert_eq!(out.tokens, vec![4, 0]);
}
