use std::collections::BTreeSet;

use densemtl_core::attention::{AttentionKind, FusionKind, XtamConfig};
use densemtl_core::data::{synthetic_scene, Batch};
use densemtl_core::losses;
use densemtl_core::model::{build_model, Architecture, DecoderSpec, EncoderSpec, Model, ModelConfig};
use densemtl_core::{Error, Graph, Task, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(arch: Architecture, tasks: &[Task]) -> ModelConfig {
    ModelConfig {
        architecture: arch,
        tasks: tasks.to_vec(),
        num_classes: 5,
        encoder: EncoderSpec { widths: vec![8, 16, 16, 32], blocks_per_stage: 1 },
        ..ModelConfig::default()
    }
}

const SDN: [Task; 3] = [Task::Seg, Task::Depth, Task::Normals];

fn images(b: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(vec![b, 3, h, w], 0.0, 1.0, &mut rng)
}

#[test]
fn three_task_ours_has_one_block_of_six_directions() {
    let m = build_model(&small(Architecture::Ours, &SDN), 0).unwrap();
    let blocks: Vec<_> = m.mtebs().collect();
    assert_eq!(blocks.len(), 1);
    assert_eq!(blocks[0].0, 1);
    assert_eq!(blocks[0].1.xtams().count(), 6);
}

#[test]
fn stl_is_single_task_without_exchange() {
    let m = build_model(&small(Architecture::Stl, &[Task::Seg]), 0).unwrap();
    assert!(m.exchanges().is_empty());
    assert!(matches!(build_model(&small(Architecture::Stl, &[Task::Seg, Task::Depth]), 0), Err(Error::Config(_))));
}

#[test]
fn scale_outside_decoder_is_rejected() {
    let mut cfg = small(Architecture::Ours, &SDN);
    cfg.scales = [5].into();
    assert!(matches!(build_model(&cfg, 0), Err(Error::Config(_))));
    cfg.scales = [0].into();
    assert!(build_model(&cfg, 0).is_err());
}

#[test]
fn two_blocks_have_more_parameters() {
    let mut cfg = small(Architecture::Ours, &SDN);
    let one = build_model(&cfg, 0).unwrap().parameter_count();
    cfg.scales = [2, 1].into();
    let two = build_model(&cfg, 0).unwrap().parameter_count();
    assert!(two > one);
}

#[test]
fn forward_shapes_and_output_contract() {
    let m = build_model(&small(Architecture::Ours, &SDN), 3).unwrap();
    let mut g = Graph::new(true);
    let x = g.constant(images(2, 64, 64, 1));
    let out = m.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(out.finals[&Task::Seg]), &[2, 5, 64, 64]);
    assert_eq!(g.shape(out.finals[&Task::Depth]), &[2, 1, 64, 64]);
    assert_eq!(g.shape(out.finals[&Task::Normals]), &[2, 3, 64, 64]);
    assert_eq!(out.intermediate.keys().copied().collect::<Vec<_>>(), vec![1]);
    assert_eq!(g.shape(out.intermediate[&1][&Task::Normals]), &[2, 3, 64, 64]);
}

#[test]
fn indivisible_input_is_an_error() {
    let m = build_model(&small(Architecture::Mtl, &SDN), 0).unwrap();
    let mut g = Graph::new(false);
    let x = g.constant(images(1, 40, 64, 0));
    assert!(matches!(m.forward(&mut g, x), Err(Error::Indivisible { factor: 16, .. })));
}

/// The MTL baseline sharing the decoder design of `cfg`.
fn mtl_twin(cfg: &ModelConfig) -> ModelConfig {
    ModelConfig { architecture: Architecture::Mtl, decoder: Some(cfg.decoder_spec()), ..cfg.clone() }
}

fn assert_bit_equal(a: &Tensor, b: &Tensor) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn zeroed_combiners_reproduce_mtl_bit_for_bit() {
    let cfg = ModelConfig { scales: [2, 1].into(), ..small(Architecture::Ours, &SDN) };
    let mut ours = build_model(&cfg, 9).unwrap();
    let mut mtl = build_model(&mtl_twin(&cfg), 9).unwrap();
    // shared weights must come from the store, not from matching seeds alone
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (id, e) in mtl.store().iter().map(|(i, e)| (i, e.clone())).collect::<Vec<_>>() {
        let noise = Tensor::randn(e.value.shape().to_vec(), 0.05, &mut rng);
        mtl.store_mut().get_mut(id).add_assign(&noise);
    }
    let copied = ours.store_mut().copy_matching(mtl.store());
    assert_eq!(copied, mtl.store().len());
    ours.zero_exchanges();

    let x = images(2, 32, 32, 4);
    for train in [true, false] {
        let run = |m: &Model| {
            let mut g = Graph::new(train);
            let xv = g.constant(x.clone());
            let out = m.forward(&mut g, xv).unwrap();
            out.finals.values().map(|&v| g.value(v).clone()).collect::<Vec<_>>()
        };
        for (a, b) in run(&ours).iter().zip(&run(&mtl)) {
            assert_bit_equal(a, b);
        }
    }
}

#[test]
fn ours_minus_mtl_is_the_block_size() {
    let cfg = small(Architecture::Ours, &SDN);
    let ours = build_model(&cfg, 0).unwrap();
    let mtl = build_model(&mtl_twin(&cfg), 0).unwrap();
    let diff = ours.parameter_count() - mtl.parameter_count();
    assert_eq!(diff, ours.exchange_parameter_count());

    // closed form for one block at scale 1 (c channels, d = max(c/8, 8))
    let c = cfg.decoder_spec().widths[1];
    let d = (c / 8).max(8);
    let n = SDN.len();
    let xtam = (c * d + d) * 2 + (c * c + c) + c + 2 * (9 * c * c + c);
    let msg = (n - 1) * 2 * c;
    let combiner = msg * c + c + 2 * c;
    assert_eq!(diff, n * (n - 1) * xtam + n * combiner);
}

#[test]
fn variants_change_block_size_consistently() {
    let base = small(Architecture::Ours, &SDN);
    let c = base.decoder_spec().widths[1];
    let count = |xtam: XtamConfig, fusion: FusionKind| {
        build_model(&ModelConfig { xtam, fusion, ..base.clone() }, 0).unwrap().exchange_parameter_count()
    };
    let plain = count(XtamConfig::default(), FusionKind::Add);
    assert_eq!(count(XtamConfig::default(), FusionKind::Prod), plain);
    assert_eq!(count(XtamConfig::default(), FusionKind::Concat), plain + 3 * (2 * c * c + c));
    let no_self = count(XtamConfig { self_attention: false, ..Default::default() }, FusionKind::Add);
    // loses two 3x3 convs per direction and half of each combiner input
    assert_eq!(plain - no_self, 6 * 2 * (9 * c * c + c) + 3 * (2 * c) * c);
    let both = count(XtamConfig { attention: AttentionKind::Both, ..Default::default() }, FusionKind::Add);
    assert_eq!(both - plain, 6 * 3 * (c * c + c));
}

#[test]
fn zero_task_model_is_encoder_only() {
    let m = build_model(&small(Architecture::Mtl, &[]), 0).unwrap();
    assert_eq!(m.parameter_count(), m.encoder_parameter_count());
    // hand count: conv3x3 without bias plus BN gamma/beta per stage
    let widths = [8, 16, 16, 32];
    let mut cin = 3;
    let mut expect = 0;
    for w in widths {
        expect += 9 * cin * w + 2 * w;
        cin = w;
    }
    assert_eq!(m.parameter_count(), expect);
}

#[test]
fn doubling_encoder_widths_roughly_quadruples_its_size() {
    let cfg = |w: Vec<usize>| ModelConfig { encoder: EncoderSpec { widths: w, blocks_per_stage: 2 }, ..small(Architecture::Mtl, &[]) };
    let a = build_model(&cfg(vec![32, 64, 128, 256]), 0).unwrap().encoder_parameter_count() as f64;
    let b = build_model(&cfg(vec![64, 128, 256, 512]), 0).unwrap().encoder_parameter_count() as f64;
    let ratio = b / a;
    assert!(ratio > 3.9 && ratio < 4.0, "{ratio}");
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    let cfg = ModelConfig { fusion: FusionKind::Concat, ..small(Architecture::Ours, &[Task::Seg, Task::Depth, Task::Edges]) };
    let mut m = build_model(&cfg, 5).unwrap();
    // perturb a buffer so that running statistics are covered too
    let rm = m.store().id("decoder.seg.up0.bn.running_mean").unwrap();
    m.store_mut().get_mut(rm).data_mut()[0] = 0.25;
    m.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back.config(), m.config());
    let x = images(1, 32, 32, 2);
    let (a, b) = (m.predict(&x).unwrap(), back.predict(&x).unwrap());
    for t in cfg.tasks {
        assert_bit_equal(&a.finals[&t], &b.finals[&t]);
    }
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(Model::load(&path).is_err());
}

#[test]
fn forward_is_deterministic() {
    let cfg = small(Architecture::ThreewaysPadnet, &SDN);
    let x = images(2, 32, 32, 8);
    let a = build_model(&cfg, 1).unwrap().predict(&x).unwrap();
    let b = build_model(&cfg, 1).unwrap().predict(&x).unwrap();
    for t in SDN {
        assert_bit_equal(&a.finals[&t], &b.finals[&t]);
    }
}

#[test]
fn every_architecture_builds_and_runs() {
    for arch in Architecture::ALL {
        let tasks: &[Task] = if arch == Architecture::Stl { &[Task::Depth] } else { &Task::ALL };
        let m = build_model(&small(arch, tasks), 0).unwrap();
        let out = m.predict(&images(1, 32, 32, 0)).unwrap();
        assert_eq!(out.finals.len(), tasks.len(), "{}", arch.name());
    }
}

fn check_contract(out: &densemtl_core::model::MtlOutput<Tensor>, classes: usize, h: usize, w: usize) -> Result<(), TestCaseError> {
    let maps = out.intermediate.values().chain(std::iter::once(&out.finals));
    for m in maps {
        for (&t, v) in m {
            let (_, c, vh, vw) = v.dims4().unwrap();
            prop_assert_eq!((c, vh, vw), (t.channels(classes), h, w));
            prop_assert!(v.all_finite());
            match t {
                Task::Depth => prop_assert!(v.data().iter().all(|&d| d > 0.0)),
                Task::Edges => prop_assert!(v.data().iter().all(|&p| (0.0..=1.0).contains(&p))),
                Task::Normals => {
                    let p = vh * vw;
                    for b in 0..v.shape()[0] {
                        for i in 0..p {
                            let n: f64 = (0..3).map(|ch| v.data()[(b * 3 + ch) * p + i].powi(2)).sum::<f64>().sqrt();
                            prop_assert!((n - 1.0).abs() < 1e-5);
                        }
                    }
                }
                Task::Seg => {}
            }
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn output_invariants_hold_for_random_weights(seed in any::<u64>(), k in 2usize..5, hm in 1usize..3, wm in 1usize..3, arch in 0usize..5) {
        let arch = Architecture::ALL[arch];
        let tasks: Vec<Task> = if arch == Architecture::Stl { vec![Task::ALL[seed as usize % 4]] } else { Task::ALL.to_vec() };
        let cfg = ModelConfig {
            architecture: arch,
            tasks,
            num_classes: k,
            encoder: EncoderSpec { widths: vec![4, 8], blocks_per_stage: 1 },
            decoder: Some(DecoderSpec { use_aspp: seed % 2 == 0, aspp_rates: vec![2], skips: seed % 3 == 0, widths: vec![8, 8, 8] }),
            scales: BTreeSet::from([1, 2]),
            ..ModelConfig::default()
        };
        let m = build_model(&cfg, seed).unwrap();
        let (h, w) = (16 * hm, 16 * wm);
        let out = m.predict(&images(2, h, w, seed)).unwrap();
        check_contract(&out, k, h, w)?;
    }
}

/// Sum of all task losses on a toy batch, for gradient-flow checks.
fn toy_loss(m: &Model, g: &mut Graph, batch: &Batch) -> densemtl_core::Var {
    let x = g.constant(batch.images.clone());
    let out = m.forward(g, x).unwrap();
    let mut terms = Vec::new();
    for maps in out.intermediate.values().chain(std::iter::once(&out.finals)) {
        let (s, _) = losses::seg_loss(g, maps[&Task::Seg], &batch.seg, losses::IGNORE_LABEL).unwrap();
        terms.push(s);
        terms.push(losses::depth_loss(g, maps[&Task::Depth], &batch.depth, 20.0).unwrap());
        terms.push(losses::normal_loss(g, maps[&Task::Normals], &batch.normals).unwrap());
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t).unwrap();
    }
    total
}

#[test]
fn xtam_gradients_flow_once_gates_open() {
    let samples: Vec<_> = (0..2).map(|i| synthetic_scene(i, 32, 5, 20.0).unwrap()).collect();
    let batch = Batch::from_samples(&samples.iter().collect::<Vec<_>>()).unwrap();
    let mut m = build_model(&small(Architecture::Ours, &SDN), 2).unwrap();

    let grads = {
        let mut g = Graph::new(true);
        let l = toy_loss(&m, &mut g, &batch);
        g.backward(l).unwrap()
    };
    for id in m.projection_ids() {
        let gr = grads.param(id).unwrap();
        assert!(gr.data().iter().all(|&v| v == 0.0), "{}", m.store().entry(id).name);
    }
    for id in m.gate_ids() {
        assert!(grads.param(id).unwrap().max_abs() > 0.0);
    }

    for id in m.gate_ids() {
        m.store_mut().get_mut(id).data_mut().fill(0.3);
    }
    let mut g = Graph::new(true);
    let l = toy_loss(&m, &mut g, &batch);
    let grads = g.backward(l).unwrap();
    let xtam_params: Vec<_> = m
        .store()
        .iter()
        .filter(|(_, e)| e.name.starts_with("mteb.") && !e.name.contains(".combine.") && e.kind == densemtl_core::ParamKind::Trainable)
        .map(|(id, e)| (id, e.name.clone()))
        .collect();
    assert!(!xtam_params.is_empty());
    for (id, name) in xtam_params {
        let gr = grads.param(id).unwrap_or_else(|| panic!("no gradient for {name}"));
        assert!(gr.max_abs() > 0.0, "zero gradient for {name}");
    }
}
