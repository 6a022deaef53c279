//! Builds the generation, evaluation and training prompt sets, checks
//! train/eval disjointness and writes the evaluation set as JSONL.

use holofair::prompts::{check_disjoint, PromptForge, TrainVocabulary, TRAIN_DEFAULT};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let forge = PromptForge::default();
    let gen = forge.build_gen_set(0)?;
    let eval = forge.build_eval_set(0)?;
    let train = forge.build_train_set(TRAIN_DEFAULT, 0, &TrainVocabulary::placeholder(), Some(&eval))?;
    println!("gen {} / eval {} / train {}", gen.len(), eval.len(), train.len());
    println!("train/eval violations: {}", check_disjoint(&train, &eval).len());

    for p in eval.prompts.iter().step_by(150) {
        println!("[{}] {}", p.trigger.as_deref().unwrap_or("neutral"), p.text);
    }
    println!("parsed back: {:?}", forge.parse(&eval.prompts[0].text)?);

    let path = std::env::temp_dir().join("eval_prompts.jsonl");
    eval.write_jsonl(std::io::BufWriter::new(std::fs::File::create(&path)?))?;
    println!("wrote {}", path.display());
    Ok(())
}
