//! Drives the whole pipeline over a generated desk-scale corpus and checks
//! the learned ranker actually beats the random baseline.

use std::path::Path;

use segsearch_core::eval::MetricsReport;
use segsearch_core::pipeline::{self, Method, PipelineConfig};
use segsearch_core::testing::write_desk_corpus;

pub const DESK_CONFIG: &str = r#"
seed = 42

[paths]
data_dir = "data"
out_dir = "out"

[splits]
train = "splits/train.txt"
val = "splits/val.txt"
test = "splits/test.txt"

[sampling]
window_len = 256
target_per_subset = 60
initial_stride = 256

[segmentation]
lambda_init = 5.0
min_len = 25

[training]
batch_size = 64
epochs = 30
learning_rate = 0.001
warmup_steps = 50
hidden_dim = 64

[eval]
n_queries = 100
pool_sizes = [100]
k_list = [1, 5, 10]
methods = ["learned", "random"]
"#;

fn setup(root: &Path) -> PipelineConfig {
    write_desk_corpus(root, 4, 1, 2, 1500, 20260811).unwrap();
    let config_path = root.join("desk.toml");
    std::fs::write(&config_path, DESK_CONFIG).unwrap();
    PipelineConfig::load(&config_path).unwrap()
}

fn read_report(cfg: &PipelineConfig, method: Method, pool: usize) -> MetricsReport {
    let text = std::fs::read_to_string(cfg.metrics_path(method, pool)).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn run_all_produces_learned_over_random_margin() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());

    pipeline::cmd_run_all(&cfg).unwrap();

    let learned = read_report(&cfg, Method::Learned, 100);
    let random = read_report(&cfg, Method::Random, 100);
    eprintln!("learned: {learned:?}");
    eprintln!("random:  {random:?}");

    // candidate volume sanity: pairs per test subset
    let splits = pipeline::load_splits(&cfg).unwrap();
    let mut n_pairs = 0usize;
    for subset in &splits.test {
        let text =
            std::fs::read_to_string(cfg.out_dir.join("pairs").join(format!("{subset}.ndjson")))
                .unwrap();
        n_pairs += text.lines().filter(|l| !l.trim().is_empty()).count();
    }
    eprintln!("test pairs: {n_pairs} over 120 windows");

    assert!(learned.recall_at_10 > random.recall_at_10);
    assert!(learned.map > random.map);
    assert!(learned.sbert_at_10.unwrap() > random.sbert_at_10.unwrap());
}
