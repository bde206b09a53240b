//! Locate fwd+bwd hotspots by timing phases.
use std::time::Instant;
use tgl_core::data::{gen_world, pack_documents, render_corpus, DocumentKind, Tokenizer, WorldSpec};
use tgl_core::model::{Model, ModelConfig, Tracking};

fn main() {
    let world = gen_world(&WorldSpec::desk_default(1)).unwrap();
    let snapshot = render_corpus(&world, 0, DocumentKind::Snapshot).unwrap();
    let tok = Tokenizer::build(snapshot.iter().map(|d| d.text.as_str())).unwrap();
    let seqs = pack_documents(snapshot.iter().map(|d| d.text.as_str()), &tok, 128);
    let model = Model::<f32>::init(ModelConfig::desk_default(tok.vocab_size(), 1)).unwrap();

    let reps = 20;
    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = model.forward_tape(&seqs[0], Tracking::None, None).unwrap();
    }
    println!("forward only (untracked): {:.1} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = model.forward_tape(&seqs[0], Tracking::Trainable, None).unwrap();
    }
    println!("forward (tracked): {:.1} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    let t0 = Instant::now();
    for _ in 0..reps {
        let (tape, loss) = model.lm_loss_tape(&seqs[0], Tracking::Trainable, None).unwrap();
        let _ = tape.graph.value(loss);
    }
    println!("forward + CE loss: {:.1} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    let t0 = Instant::now();
    for _ in 0..reps {
        let (tape, loss) = model.lm_loss_tape(&seqs[0], Tracking::Trainable, None).unwrap();
        let _ = tape.graph.backward(loss).unwrap();
    }
    println!("forward + CE + backward: {:.1} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);
}
