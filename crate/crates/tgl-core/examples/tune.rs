//! Scratch harness for sizing desk-scale defaults: times the kernels, runs
//! domain pretraining, prints the gradient profile and uptake numbers.
//!
//! cargo run --release -p tgl-core --example tune -- [pretrain_epochs] [continual_epochs] [seed]

use std::time::Instant;

use tgl_core::data::{
    gen_probes, gen_world, pack_documents, render_corpus, DocumentKind, ProbeCategory,
    ProbeSplit, Tokenizer, WorldSpec,
};
use tgl_core::eval::{evaluate, PplAggregation};
use tgl_core::model::{Model, ModelConfig, Tracking};
use tgl_core::profiler::{relative_profile, ProfileConfig};
use tgl_core::tgl::{make_plan, TglMode, UpdatePlan};
use tgl_core::train::{run_phase, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let pretrain_epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let continual_epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);

    let world_spec = WorldSpec::desk_default(seed);
    let world = gen_world(&world_spec).unwrap();
    let snapshot = render_corpus(&world, 0, DocumentKind::Snapshot).unwrap();
    let edits1 = render_corpus(&world, 1, DocumentKind::Edit).unwrap();
    let probes1 = gen_probes(&world, 1).unwrap();

    let all_texts: Vec<&str> = snapshot
        .iter()
        .chain(&edits1)
        .map(|d| d.text.as_str())
        .chain(probes1.iter().map(|p| p.left_context.as_str()))
        .chain(probes1.iter().map(|p| p.answer.as_str()))
        .collect();
    let tokenizer = Tokenizer::build(all_texts.into_iter()).unwrap();
    println!("vocab = {}", tokenizer.vocab_size());

    let snap_seqs = pack_documents(
        snapshot.iter().map(|d| d.text.as_str()),
        &tokenizer,
        128,
    );
    let edit_seqs = pack_documents(edits1.iter().map(|d| d.text.as_str()), &tokenizer, 128);
    println!(
        "snapshot: {} docs -> {} seqs; edits_y1: {} docs -> {} seqs",
        snapshot.len(),
        snap_seqs.len(),
        edits1.len(),
        edit_seqs.len()
    );

    let mcfg = ModelConfig::desk_default(tokenizer.vocab_size(), seed);
    let mut model = Model::<f32>::init(mcfg).unwrap();
    println!("params = {}", model.total_params());

    // Kernel timing: forward+backward on one packed sequence.
    let t0 = Instant::now();
    let reps = 10;
    for _ in 0..reps {
        let (tape, loss) = model
            .lm_loss_tape(&snap_seqs[0], Tracking::Trainable, None)
            .unwrap();
        let _ = tape.graph.backward(loss).unwrap();
    }
    let per_seq = t0.elapsed().as_secs_f64() / reps as f64;
    println!("fwd+bwd per seq: {:.1} ms", per_seq * 1e3);
    println!(
        "pretrain estimate: {:.1} s for {} epochs",
        per_seq * (snap_seqs.len() * pretrain_epochs) as f64,
        pretrain_epochs
    );

    // Domain pretraining.
    let mut tcfg = TrainConfig::desk_default(seed);
    if let Some(bs) = args.get(4).and_then(|s| s.parse().ok()) {
        tcfg.batch_size = bs;
    }
    let t0 = Instant::now();
    let result = run_phase(
        &mut model,
        &snap_seqs,
        Some(&snap_seqs[..8.min(snap_seqs.len())]),
        &tcfg,
        &UpdatePlan::identity(),
        pretrain_epochs,
    )
    .unwrap();
    println!(
        "pretrain: {} steps in {:.1}s; first loss {:.3}, last loss {:.3}",
        result.steps_run,
        t0.elapsed().as_secs_f64(),
        result.metrics.first().map(|m| m.train_loss).unwrap_or(0.0),
        result.metrics.last().map(|m| m.train_loss).unwrap_or(0.0),
    );

    // Evaluation on year-1 test probes before continual training.
    let test_probes: Vec<_> = probes1
        .iter()
        .filter(|p| p.split == ProbeSplit::Test)
        .cloned()
        .collect();
    let before = evaluate(&model, &tokenizer, &test_probes, PplAggregation::ExampleMacro).unwrap();
    println!(
        "domain-pretrained ppl: popular {:.2}  new_entity {:.2}  update {:.2}",
        before.per_category.popular.unwrap(),
        before.per_category.new_entity.unwrap(),
        before.per_category.update.unwrap()
    );

    // Gradient profile: validation Update probes vs snapshot baseline.
    let val_probes: Vec<_> = probes1
        .iter()
        .filter(|p| p.split == ProbeSplit::Validation && p.category == ProbeCategory::Update)
        .collect();
    let probe_encoded: Vec<_> = val_probes
        .iter()
        .map(|p| tgl_core::eval::encode_probe(&tokenizer, p).unwrap())
        .collect();
    let pcfg = ProfileConfig {
        seed,
        ..ProfileConfig::default()
    };
    let t0 = Instant::now();
    let profile = relative_profile(&model, &probe_encoded, &snap_seqs, &pcfg).unwrap();
    println!("profile in {:.1}s:", t0.elapsed().as_secs_f64());
    for (group, e) in &profile.entries {
        println!(
            "  {group}: probe {:.4} baseline {:.4} relative {:.3}",
            e.probe_norm, e.baseline_norm, e.relative_norm
        );
    }
    println!(
        "  mean {:.3} max {:.3} attn_mean {:.3} mlp_mean {:.3}",
        profile.mean_relative_norm(),
        profile.max_relative_norm(),
        profile.component_mean(tgl_core::model::Component::Attention),
        profile.component_mean(tgl_core::model::Component::Mlp),
    );

    // Also against the edit stream as baseline.
    let profile_edit = relative_profile(&model, &probe_encoded, &edit_seqs, &pcfg).unwrap();
    println!(
        "  (edit baseline) mean {:.3} max {:.3} attn_mean {:.3} mlp_mean {:.3}",
        profile_edit.mean_relative_norm(),
        profile_edit.max_relative_norm(),
        profile_edit.component_mean(tgl_core::model::Component::Attention),
        profile_edit.component_mean(tgl_core::model::Component::Mlp),
    );

    // Vanilla continual phase on year-1 edits.
    let mut vanilla = model.to_precision::<f32>();
    let t0 = Instant::now();
    run_phase(
        &mut vanilla,
        &edit_seqs,
        None,
        &tcfg,
        &UpdatePlan::identity(),
        continual_epochs,
    )
    .unwrap();
    println!("continual vanilla in {:.1}s", t0.elapsed().as_secs_f64());
    let after = evaluate(&vanilla, &tokenizer, &test_probes, PplAggregation::ExampleMacro).unwrap();
    println!(
        "vanilla ppl: popular {:.2}  new_entity {:.2}  update {:.2}",
        after.per_category.popular.unwrap(),
        after.per_category.new_entity.unwrap(),
        after.per_category.update.unwrap()
    );
    let rel = |b: f64, a: f64| 100.0 * (b - a) / b;
    println!(
        "uptake: new_entity {:.1}% update {:.1}% (need >= 20%)  popular drift {:+.1}%",
        rel(
            before.per_category.new_entity.unwrap(),
            after.per_category.new_entity.unwrap()
        ),
        rel(
            before.per_category.update.unwrap(),
            after.per_category.update.unwrap()
        ),
        rel(
            before.per_category.popular.unwrap(),
            after.per_category.popular.unwrap()
        ),
    );

    // TGL+FP on top of vanilla.
    let plan = make_plan(&profile, TglMode::Fp).unwrap();
    println!(
        "fp plan freezes {:?}",
        plan.frozen.iter().map(|g| g.to_string()).collect::<Vec<_>>()
    );
    let mut fp_model = model.to_precision::<f32>();
    run_phase(
        &mut fp_model,
        &edit_seqs,
        None,
        &tcfg,
        &plan,
        continual_epochs,
    )
    .unwrap();
    let after_fp = evaluate(&fp_model, &tokenizer, &test_probes, PplAggregation::ExampleMacro).unwrap();
    println!(
        "tgl+fp ppl: popular {:.2}  new_entity {:.2}  update {:.2}",
        after_fp.per_category.popular.unwrap(),
        after_fp.per_category.new_entity.unwrap(),
        after_fp.per_category.update.unwrap()
    );
}
