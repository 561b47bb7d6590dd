//! Walks one pixel through the ordinal head: logits, pairwise
//! probabilities, the loss for a few targets, and the decoded height.

use ordsurf::ordinal::{decode_class, ordinal_loss_and_grad, pair_softmax, OrdinalLogits};
use ordsurf::{ClassMap, DiscretizationScheme, Midpoint};

fn main() {
    let k = 6;
    let scheme = DiscretizationScheme::sid(0.0, 40.0, k).unwrap();
    // channel pairs (2i, 2i+1); the "above" logit wins for the first three thresholds
    let logits: Vec<f64> = (0..k).flat_map(|i| [0.0, 2.0 - i as f64]).collect();
    let logits = OrdinalLogits::new(1, 1, k, logits).unwrap();
    let probs = pair_softmax(&logits).unwrap();
    for i in 0..k {
        println!("P(height > t_{i}) = {:.3}", probs.at(i, 0));
    }

    let class = decode_class(&probs).unwrap();
    let d = class.classes()[0] as usize;
    let h = scheme.decode_with(d, Midpoint::Geometric).unwrap();
    println!("decoded bin {d}, {h:.2} m");

    for target in [0, d, k - 1] {
        let c = ClassMap::new(1, 1, k, vec![target as u16]).unwrap();
        let (loss, _) = ordinal_loss_and_grad(&logits, &c).unwrap();
        println!("loss if the truth were bin {target}: {loss:.3}");
    }
}
