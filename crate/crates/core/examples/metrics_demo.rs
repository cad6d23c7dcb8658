//! Frame accuracy, segmental edit score and segmental mAP on hand-made labels.

use tcnseg::data::LabelSequence;
use tcnseg::metrics::{collapse, edit_score, evaluate, frame_accuracy, MAP_THRESHOLDS};
use tcnseg::network::ProbabilitySequence;
use tcnseg::Matrix;

fn letters(s: &str) -> Vec<usize> {
    s.bytes().map(|b| usize::from(b - b'A') + 1).collect()
}

fn main() -> tcnseg::Result<()> {
    let truth = letters("AAAABBBBBBCCCCAAAA");
    let pred = letters("AAAAABBBBCCACCCAAA");

    let segments: String = collapse(&pred).iter().map(|s| char::from(b'A' + s.class_id as u8 - 1)).collect();
    println!("collapsed prediction: {segments}");
    println!("frame accuracy: {:.2}", frame_accuracy(&pred, &truth, None)?);
    println!("edit score:     {:.2}", edit_score(&pred, &truth)?);

    // One-hot probabilities with a little uncertainty give each predicted
    // segment a confidence for the mAP ranking.
    let probs = Matrix::from_fn(3, pred.len(), |c, t| if pred[t] == c + 1 { 0.8 } else { 0.1 });
    let report = evaluate(&ProbabilitySequence { probs }, &LabelSequence::new(truth), &MAP_THRESHOLDS)?;
    print!("{}", report.to_key_value());
    Ok(())
}
