//! Drives the experiment runner from code: a training-length sweep of the
//! unstructured and structured bounds, printed as CSV.

use ris_core::harness::{run_crb_sweep, write_csv, ExperimentConfig};

const CONFIG: &str = r#"
[geometry]
m = 8
n_x = 4
n_y = 2
k = 2

[channel]
model = "geometric"
d_h = 2
d_g = 2
gain_rule = "inverse_path_count"

[training]
plan = "dft"
snr_db = 0.0

[sweep]
t = [18, 24, 32, 48]

[mc]
trials = 20
seed = 42
"#;

fn main() {
    let cfg = ExperimentConfig::from_toml(CONFIG).expect("valid config");
    match run_crb_sweep(&cfg, None) {
        Ok(rows) => write_csv(&rows, std::io::stdout()).expect("stdout"),
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(e.exit_code());
        }
    }
}
