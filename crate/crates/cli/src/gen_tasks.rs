use std::io::Write;

use anyhow::Result;
use nammkit_core::error::NammError;
use nammkit_core::tasks::{format_record, make_eval_set, Split, TaskKind};

use crate::GenTasksArgs;

/// Writes `count` records per selected task, one per line.
pub fn run(args: &GenTasksArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = args.common.load_config()?;
    if args.count == 0 {
        return Err(NammError::Config("--count must be positive".into()).into());
    }
    let split = if args.split == "train" { Split::Train } else { Split::Test };
    let tasks = match &args.task {
        Some(id) => {
            let kind = TaskKind::from_id(id).map_err(|e| NammError::Config(e.to_string()))?;
            vec![*cfg.task(kind)?]
        }
        None => cfg.tasks.clone(),
    };
    for t in &tasks {
        for s in make_eval_set(t, args.count, args.common.seed, split)? {
            writeln!(out, "{}", format_record(&s))?;
        }
    }
    out.flush()?;
    Ok(())
}
