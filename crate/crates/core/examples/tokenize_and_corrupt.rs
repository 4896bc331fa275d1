//! Tokenize a string, mask two positions, and sample replacements.

use lambo::dae::sample_proposals;
use lambo::seq::{apply_mask_corruption, detokenize, select_positions, tokenize, Vocabulary};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let vocab = Vocabulary::amino_acids();
    let seq = tokenize("AVCAMKLVCA", &vocab, 12)?;
    println!("ids       {:?}", seq.ids());

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let plan = select_positions(&seq, 2, &vocab, &mut rng)?;
    let masked = apply_mask_corruption(&seq, &plan, &vocab);
    println!("positions {:?}", plan.positions());
    let shown: Vec<&str> = masked.ids()[..masked.len(&vocab)]
        .iter()
        .map(|&i| vocab.token(i))
        .collect();
    println!("masked    {}", shown.join(" "));

    // flat logits give uniform substitutions among the other regular tokens
    let logits = vec![0.0; seq.t_max() * vocab.len()];
    for _ in 0..3 {
        let mutant = sample_proposals(&logits, &seq, &plan, &vocab, &mut rng)?;
        println!(
            "mutant    {}  (hamming {})",
            detokenize(&mutant, &vocab)?,
            mutant.hamming(&seq)
        );
    }
    print!("{}", vocab.to_file_string());
    Ok(())
}
