//! Regenerates the shipped eval prompt set at data/eval_prompts.txt.

use iris_lab::domain::Vocabulary;
use iris_lab::experiments::write_eval_prompt_file;
use std::path::Path;

fn main() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/eval_prompts.txt");
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    write_eval_prompt_file(&Vocabulary::default(), &path).unwrap();
    println!("wrote {}", path.display());
}
