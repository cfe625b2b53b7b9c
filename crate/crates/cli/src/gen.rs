use std::path::{Path, PathBuf};

use clap::Args;
use genb::biasworld::{generate_split, prior_table, save_dataset, DatasetSpec, SplitTag};

use crate::failure::{io_failure, CmdResult, Failure};

pub const TRAIN_FILE: &str = "train.tar";
pub const TEST_FILE: &str = "test.tar";
pub const SPEC_ECHO: &str = "dataset.toml";

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Output directory for train.tar, test.tar and dataset.toml.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with dataset fields; flags below override it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub num_qtypes: Option<usize>,
    #[arg(long)]
    pub objects_per_image: Option<usize>,
    #[arg(long)]
    pub visual_dim: Option<usize>,
    #[arg(long)]
    pub question_len: Option<usize>,
    /// Fraction of majority answers in the train split.
    #[arg(long)]
    pub train_skew: Option<f64>,
    /// Fraction of majority answers in the test split.
    #[arg(long)]
    pub test_skew: Option<f64>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long)]
    pub signal_noise_sigma: Option<f64>,
    /// Put part of the label mass on the paired answer.
    #[arg(long)]
    pub soft_label: bool,
}

impl GenArgs {
    fn resolve(&self) -> CmdResult<DatasetSpec> {
        let mut spec = match &self.spec {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
                toml::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
            }
            None => DatasetSpec::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    spec.$field = v;
                }
            )*};
        }
        apply!(seed, objects_per_image, visual_dim, question_len, train_skew, test_skew, train_size, test_size, signal_noise_sigma);
        if let Some(t) = self.num_qtypes {
            spec.num_qtypes = t;
            spec.num_answers = 2 * t;
        }
        spec.soft_label |= self.soft_label;
        spec.validate()?;
        Ok(spec)
    }
}

pub fn run(args: &GenArgs) -> CmdResult {
    let spec = args.resolve()?;
    std::fs::create_dir_all(&args.out).map_err(|e| io_failure(&args.out, e))?;
    let echo = toml::to_string(&spec).expect("dataset spec serializes");
    let echo_path = args.out.join(SPEC_ECHO);
    std::fs::write(&echo_path, &echo).map_err(|e| io_failure(&echo_path, e))?;

    for (split, file) in [(SplitTag::Train, TRAIN_FILE), (SplitTag::Test, TEST_FILE)] {
        let bundle = generate_split(&spec, split)?;
        save_dataset(&bundle, &args.out.join(file))?;
        if split == SplitTag::Train {
            print_prior(&bundle)?;
        }
    }
    println!("{echo}");
    println!("wrote {} and {} to {}", TRAIN_FILE, TEST_FILE, args.out.display());
    Ok(())
}

fn print_prior(bundle: &genb::biasworld::SplitBundle) -> CmdResult {
    let prior = prior_table(bundle)?;
    println!("train answer prior (rows: question type, columns: answer)");
    for (t, row) in prior.rows.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|p| format!("{p:.3}")).collect();
        println!("  q{t} (n={:>5}) {}", prior.counts[t], cells.join(" "));
    }
    Ok(())
}

pub fn load_splits(dir: &Path) -> CmdResult<(genb::biasworld::SplitBundle, genb::biasworld::SplitBundle)> {
    let train = genb::biasworld::load_dataset(&dir.join(TRAIN_FILE))?;
    let test = genb::biasworld::load_dataset(&dir.join(TEST_FILE))?;
    Ok((train, test))
}
