mod common;

use std::collections::BTreeSet;

use common::{image, rows, run, toy_arch, Owned, SYSTEM};
use m2pt_core::attention::AttentionRegionReport;
use m2pt_core::model::{encoder_layer_forward, patchify_embed, Graph};
use m2pt_core::pipeline::loss;
use m2pt_core::prompt::{textual_prompt_name, visual_prompt_name};
use m2pt_core::sequence::Region;
use m2pt_core::trainer::partition_params;
use m2pt_core::{Error, Example, M2ptModel, ScheduleVariant};
use m2pt_tensor::{finite_diff_check, GradCheckConfig, ParamStore, Tape, Tensor};

#[test]
fn full_forward_gradients_match_finite_differences() {
    let arch = toy_arch(2, 2);
    let model = M2ptModel::new(arch, 3).unwrap();
    let partition = partition_params(&model.params, &arch, false, true).unwrap();
    let data = Owned::new(&arch.spec, 2);
    let batch = data.batch();
    let params = model.params.cast::<f64>();
    let report = finite_diff_check(&params, &partition.trainable, GradCheckConfig::default(), |tape, store| {
        let mut g = Graph::new(tape, store, &partition.trainable);
        loss(&mut g, &arch, &SYSTEM, &batch).map(|(l, _)| l)
    })
    .unwrap();
    assert_eq!(report.params.len(), partition.trainable.len());
    assert!(report.passed(), "max relative error {}", report.max_rel_error());
    assert!(report.get("encoder.layer1.attn.q.weight").is_none());
}

#[test]
fn later_tokens_never_reach_earlier_positions() {
    let arch = toy_arch(2, 2);
    let model = M2ptModel::new(arch, 4).unwrap();
    let img = image(&arch.spec, 1);
    let a = Example {
        image: &img,
        instruction: &[3, 4, 5],
        target: &[6, 0],
    };
    let b = Example { target: &[6, 9], ..a };
    let (ta, tra) = run(&arch, &model.params, &[a]);
    let (tb, trb) = run(&arch, &model.params, &[b]);
    let last = tra.hidden.layouts[0].len() - 1;
    for (la, lb) in tra.llm_layers.iter().zip(&trb.llm_layers) {
        let (va, vb) = (ta.value(la.seq.value), tb.value(lb.seq.value));
        assert_eq!(rows(va, 0..last), rows(vb, 0..last));
        assert_ne!(rows(va, last..last + 1), rows(vb, last..last + 1));
    }
}

#[test]
fn single_token_attends_to_itself() {
    let mut arch = toy_arch(0, 0);
    arch.project_prompts = false;
    let model = M2ptModel::new(arch, 4).unwrap();
    let (tape, trace) = run(&arch, &model.params, &Owned::new(&arch.spec, 1).batch());
    let maps = tape.attention_maps(trace.llm_layers[0].attention).unwrap();
    let p = maps.head(0, 0);
    assert_eq!(p[0], 1.0);
}

#[test]
fn encoder_is_permutation_equivariant_without_positions() {
    let arch = toy_arch(0, 3);
    let mut model = M2ptModel::new(arch, 5).unwrap();
    let pos = model.params.get_mut("encoder.pos_embed").unwrap();
    pos.data_mut().fill(0.0);
    let d = arch.spec.vision.patch_dim;
    let img = image(&arch.spec, 2);
    let mut swapped = img.clone();
    // swap patches 0 and 3
    let (a, b) = (img.data()[..d].to_vec(), img.data()[3 * d..4 * d].to_vec());
    swapped.data_mut()[..d].copy_from_slice(&b);
    swapped.data_mut()[3 * d..4 * d].copy_from_slice(&a);

    let out = |image: &Tensor<f32>| {
        let none = BTreeSet::new();
        let mut tape = Tape::<f32>::new();
        let mut g = Graph::new(&mut tape, &model.params, &none);
        let seq = patchify_embed(&mut g, &arch.spec.vision, &[image]).unwrap();
        let seq = m2pt_core::prompt::insert_visual_prompts(&mut g, &arch.plan, &arch.spec, 1, &seq).unwrap();
        let o = encoder_layer_forward(&mut g, &arch.spec.vision, 1, &seq).unwrap();
        g.tape.value(o.seq.value).clone()
    };
    let (x, y) = (out(&img), out(&swapped));
    let close = |p: Vec<f32>, q: Vec<f32>| p.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-5);
    let lv = 3;
    assert!(close(rows(&x, lv..lv + 1), rows(&y, lv + 3..lv + 4)));
    assert!(close(rows(&x, lv + 3..lv + 4), rows(&y, lv..lv + 1)));
    assert!(close(rows(&x, lv + 1..lv + 3), rows(&y, lv + 1..lv + 3)));
    assert!(close(rows(&x, 0..lv), rows(&y, 0..lv)));
}

#[test]
fn scheduled_layers_see_prompt_plus_carried_rows() {
    for variant in ScheduleVariant::ALL {
        let mut arch = toy_arch(3, 5);
        arch.plan.schedule = variant;
        let model = M2ptModel::new(arch, 6).unwrap();
        let data = Owned::new(&arch.spec, 2);
        let (_, trace) = run(&arch, &model.params, &data.batch());
        let vis = arch.plan.visual_layers(&arch.spec);
        for (i, input) in trace.encoder_inputs.iter().enumerate() {
            let want = if vis.contains(&(i + 1)) { 5 } else { 0 };
            for l in &input.layouts {
                assert_eq!(l.width(Region::VisualPrompt), want, "{variant} encoder layer {}", i + 1);
                assert_eq!(l.len(), want + 4);
            }
        }
        let txt = arch.plan.textual_layers(&arch.spec);
        let carried = trace.fused.seq.layouts[0].len();
        for (j, input) in trace.llm_inputs.iter().enumerate() {
            let want = if txt.contains(&(j + 1)) { 3 } else { 0 };
            assert_eq!(input.layouts[0].width(Region::TextualPrompt), want, "{variant} llm layer {}", j + 1);
            assert_eq!(input.layouts[0].len(), want + carried);
        }
    }
}

#[test]
fn fresh_prompts_replace_previous_prompt_outputs() {
    let arch = toy_arch(2, 3);
    let model = M2ptModel::new(arch, 7).unwrap();
    let data = Owned::new(&arch.spec, 1);
    let batch = data.batch();
    let mut bumped = model.params.clone();
    let p1 = bumped.get_mut(&visual_prompt_name(1)).unwrap();
    p1.data_mut().iter_mut().for_each(|v| *v += 0.5);

    let (ta, a) = run(&arch, &model.params, &batch);
    let (tb, b) = run(&arch, &bumped, &batch);
    // layer 1 non-prompt outputs move with P_v^1
    let (oa, ob) = (ta.value(a.encoder_layers[0].seq.value), tb.value(b.encoder_layers[0].seq.value));
    assert_ne!(rows(oa, 3..7), rows(ob, 3..7));
    // layer 2's prompt rows are exactly P_v^2, whatever layer 1 did to its prompts
    let p2 = model.params.get(&visual_prompt_name(2)).unwrap().data().to_vec();
    assert_eq!(rows(ta.value(a.encoder_inputs[1].value), 0..3), p2);
    assert_eq!(rows(tb.value(b.encoder_inputs[1].value), 0..3), p2);
    // and its carried rows are layer 1's non-prompt outputs
    assert_eq!(rows(ta.value(a.encoder_inputs[1].value), 3..7), rows(oa, 3..7));
    // same on the language side
    let pt2 = model.params.get(&textual_prompt_name(2)).unwrap().data().to_vec();
    assert_eq!(rows(ta.value(a.llm_inputs[1].value), 0..2), pt2);
}

#[test]
fn unscheduled_layers_carry_only_non_prompt_rows() {
    let mut arch = toy_arch(2, 3);
    arch.plan.schedule = ScheduleVariant::FirstLayer;
    let model = M2ptModel::new(arch, 8).unwrap();
    let (tape, trace) = run(&arch, &model.params, &Owned::new(&arch.spec, 1).batch());
    let out1 = tape.value(trace.encoder_layers[0].seq.value);
    let in2 = tape.value(trace.encoder_inputs[1].value);
    assert_eq!(in2.rows(), 4);
    assert_eq!(in2.data(), rows(out1, 3..7).as_slice());
    let n = trace.llm_inputs[1].layouts[0].len();
    let out1 = tape.value(trace.llm_layers[0].seq.value);
    assert_eq!(tape.value(trace.llm_inputs[1].value).data(), rows(out1, 2..2 + n).as_slice());
}

#[test]
fn prompt_gradients_follow_the_schedule() {
    let mut arch = toy_arch(2, 2);
    arch.plan.schedule = ScheduleVariant::FirstLayer;
    let model = M2ptModel::new(arch, 9).unwrap();
    let partition = partition_params(&model.params, &arch, false, true).unwrap();
    let data = Owned::new(&arch.spec, 2);
    let mut tape = Tape::<f32>::new();
    let mut g = Graph::new(&mut tape, &model.params, &partition.trainable);
    let (l, _) = loss(&mut g, &arch, &SYSTEM, &data.batch()).unwrap();
    let grads = tape.backward(l).unwrap().named(&tape);
    assert!(grads.get(&visual_prompt_name(1)).unwrap().norm_sq() > 0.0);
    assert!(grads.get(&textual_prompt_name(1)).unwrap().norm_sq() > 0.0);
    assert!(grads.get(&visual_prompt_name(2)).is_none());
    assert!(grads.get("encoder.layer1.attn.q.weight").is_none());
}

#[test]
fn loss_reaches_visual_prompts_through_the_interaction_layer() {
    let arch = toy_arch(2, 2);
    let model = M2ptModel::new(arch, 10).unwrap();
    let data = Owned::new(&arch.spec, 2);
    let only: BTreeSet<String> = [visual_prompt_name(1)].into();
    let mut tape = Tape::<f32>::new();
    let mut g = Graph::new(&mut tape, &model.params, &only);
    let (l, _) = loss(&mut g, &arch, &SYSTEM, &data.batch()).unwrap();
    let grads = tape.backward(l).unwrap().named(&tape);
    assert!(grads.get(&visual_prompt_name(1)).unwrap().norm_sq() > 0.0);
}

#[test]
fn attention_rows_and_region_masses_are_conserved() {
    for (lt, lv) in [(2, 3), (0, 3), (2, 0), (0, 0)] {
        let arch = toy_arch(lt, lv);
        let model = M2ptModel::new(arch, 11).unwrap();
        let data = Owned::new(&arch.spec, 3);
        let (tape, trace) = run(&arch, &model.params, &data.batch());
        for layer in trace.encoder_layers.iter().chain(&trace.llm_layers) {
            let maps = tape.attention_maps(layer.attention).unwrap();
            for s in 0..maps.segment_lens.len() {
                let len = maps.segment_lens[s];
                for h in 0..maps.heads {
                    for row in maps.head(s, h).chunks(len) {
                        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
                    }
                }
            }
        }
        for s in 0..3 {
            let report = AttentionRegionReport::from_trace(&tape, &trace, s).unwrap();
            for map in [&report.encoder, &report.llm] {
                assert!((map.weighted_total() - 1.0).abs() < 1e-4);
                assert!(map.regions.iter().all(|r| r.mean >= 0.0 && r.width > 0));
                assert!(map.row_sums().iter().all(|r| (r - 1.0).abs() < 1e-5));
            }
            assert_eq!(report.llm.region(Region::TextualPrompt).is_some(), lt > 0);
            assert_eq!(report.llm.region(Region::VisualPrompt).is_some(), lv > 0);
            assert_eq!(report.encoder.region(Region::VisualPrompt).is_some(), lv > 0);
            assert!(report.llm.region(Region::ImageTokens).is_some());
            assert!(report.llm.region(Region::SystemText).is_some());
            assert!(report.llm.region(Region::Instruction).is_some());
        }
    }
}

#[test]
fn report_without_captured_probabilities_is_a_state_error() {
    let arch = toy_arch(2, 2);
    let model = M2ptModel::new(arch, 12).unwrap();
    let (tape, mut trace) = run(&arch, &model.params, &Owned::new(&arch.spec, 1).batch());
    // point the last layer at a node that is not an attention output
    trace.llm_layers.last_mut().unwrap().attention = trace.hidden.value;
    let err = AttentionRegionReport::from_trace(&tape, &trace, 0).unwrap_err();
    assert!(matches!(err, Error::State(_)));
}

#[test]
fn frozen_backbone_with_zero_head_bias_and_zero_hidden_gives_zero_logits() {
    let arch = toy_arch(0, 0);
    let model = M2ptModel::new(arch, 13).unwrap();
    let none = BTreeSet::new();
    let mut tape = Tape::<f32>::new();
    let mut g = Graph::new(&mut tape, &model.params, &none);
    let h = g.tape.constant(Tensor::zeros(vec![5, arch.spec.language.model_dim]));
    let logits = m2pt_core::model::head_logits(&mut g, h).unwrap();
    let v = tape.value(logits);
    assert_eq!(v.shape(), &[5, arch.spec.language.vocab_size]);
    assert!(v.data().iter().all(|&x| x == 0.0));
}

#[test]
fn sequences_longer_than_the_context_are_rejected() {
    let arch = toy_arch(2, 2);
    let model = M2ptModel::new(arch, 14).unwrap();
    let img = image(&arch.spec, 3);
    let long = vec![3; 60];
    let ex = Example {
        image: &img,
        instruction: &long,
        target: &[0],
    };
    let err = model.loss_value(&SYSTEM, &[ex]).unwrap_err();
    assert!(matches!(err, Error::Capacity(_)), "{err}");
}

#[test]
fn parameter_store_round_trips_through_f64() {
    let model = M2ptModel::new(toy_arch(1, 1), 15).unwrap();
    let back: ParamStore<f32> = model.params.cast::<f64>().cast();
    assert!(back.bitwise_eq(&model.params));
}
