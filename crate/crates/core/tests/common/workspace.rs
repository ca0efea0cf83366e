//! A scratch directory for running `pig` commands in-process.

use std::path::{Path, PathBuf};

use clap::Parser;
use pig_retrieval::commands::{run, Cli};
use pig_retrieval::PigError;

pub const TINY: &str = "\
data.pairs = 60
data.z_dim = 4
data.d_in = 6
data.frames = 2
data.patches = 4
data.p_info = 1
data.text_len = 3
model.d = 8
model.heads = 2
model.d_in = 6
model.frames = 2
model.patches = 4
model.top_k = 2
model.text_max_len = 4
model.encoder_depth = 1
model.text_depth = 1
model.generator_depth = 1
model.mlp_ratio = 2
train.stage0_steps = 3
train.stage1_steps = 3
train.stage2_steps = 4
train.batch_size = 4
train.eval_every = 2
";

pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    pub fn new() -> Self {
        let ws = Workspace {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(ws.path("tiny.cfg"), TINY).unwrap();
        ws
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn run(&self, args: &[&str]) -> Result<String, PigError> {
        let mut argv = vec!["pig".to_string()];
        for a in args {
            // `@name` refers to a file in the workspace.
            argv.push(match a.strip_prefix('@') {
                Some(name) => self.path(name).display().to_string(),
                None => a.to_string(),
            });
        }
        run(Cli::try_parse_from(argv).expect("valid arguments"))
    }

    pub fn ok(&self, args: &[&str]) -> String {
        self.run(args).unwrap_or_else(|e| panic!("{args:?} failed: {e}"))
    }

    /// Dataset plus a checkpoint trained through both stages.
    pub fn trained() -> Self {
        let ws = Workspace::new();
        ws.ok(&["gen-data", "--spec", "@tiny.cfg", "--out", "@data.pigd"]);
        ws.ok(&["train", "--config", "@tiny.cfg", "--data", "@data.pigd", "--out", "@model.ckpt"]);
        ws
    }
}

pub fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

