use tgl_core::data::{gen_world, pack_documents, render_corpus, DocumentKind, Tokenizer, WorldSpec};
use tgl_core::model::{Model, ModelConfig, Tracking};
fn main() {
    let world = gen_world(&WorldSpec::desk_default(1)).unwrap();
    let snapshot = render_corpus(&world, 0, DocumentKind::Snapshot).unwrap();
    let tok = Tokenizer::build(snapshot.iter().map(|d| d.text.as_str())).unwrap();
    let seqs = pack_documents(snapshot.iter().map(|d| d.text.as_str()), &tok, 128);
    let model = Model::<f32>::init(ModelConfig::desk_default(tok.vocab_size(), 1)).unwrap();
    loop {
        let (tape, loss) = model.lm_loss_tape(&seqs[0], Tracking::Trainable, None).unwrap();
        let _ = tape.graph.backward(loss).unwrap();
    }
}
