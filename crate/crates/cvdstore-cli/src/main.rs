//! Git-style command-line front end over the versioned dataset store.
//!
//! The store root is taken from `--root`, falling back to the
//! `CVDSTORE_ROOT` environment variable, then the current directory.
//!
//! Exit codes: 0 on success, 1 on user errors (one-line message on stderr),
//! 2 when the store is corrupt.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cvdstore::engine::{
    checkout, commit, diff, init_cvd, read_csv, read_schema_file, scan_version,
    staged_table, write_csv, MaterializedTable, Predicate,
};
use cvdstore::error::Error;
use cvdstore::graph::VersionId;
use cvdstore::maintain::{
    execute_migration, maintenance_check, plan_migration, CheckOutcome, MaintenancePolicy,
    StorageBudget,
};
use cvdstore::partition::{estimate_costs, PartitioningScheme};
use cvdstore::store::{Cvd, StoreRoot};

#[derive(Parser)]
#[command(name = "cvd", about = "Version-controlled dataset store", version)]
struct Cli {
    /// Store root directory (defaults to $CVDSTORE_ROOT, then `.`)
    #[arg(long, global = true)]
    root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a CVD from a schema file and optional CSV data
    Init {
        name: String,
        /// Schema file: one `name:type` per line (int|decimal|text)
        #[arg(short = 's', long = "schema")]
        schema: PathBuf,
        /// CSV file holding the root version's rows
        #[arg(short = 'f', long = "file")]
        file: Option<PathBuf>,
        /// Comma-separated primary-key column names
        #[arg(long, value_delimiter = ',')]
        pk: Vec<String>,
    },
    /// Materialize one or more versions into a staged table or CSV file
    Checkout {
        cvd: String,
        /// Versions in precedence order (earlier wins on key collisions)
        #[arg(short = 'v', required = true)]
        versions: Vec<String>,
        #[command(flatten)]
        target: Target,
    },
    /// Commit a staged table or CSV file as a new version
    Commit {
        cvd: String,
        #[command(flatten)]
        target: Target,
        #[arg(short = 'm', long = "message", default_value = "")]
        message: String,
        /// Schema file; required with `-f`
        #[arg(short = 's', long = "schema")]
        schema: Option<PathBuf>,
    },
    /// Show the record-level difference between two versions
    Diff { cvd: String, a: String, b: String },
    /// List CVDs under the store root
    Ls,
    /// Remove a CVD and its staged checkouts
    Drop { name: String },
    /// Set the maintenance policy and migrate the layout if it pays off
    Optimize {
        cvd: String,
        /// Storage budget: an absolute record count, or a multiple of the
        /// distinct record count with an `x` suffix (e.g. `2.0x`)
        #[arg(long)]
        gamma: Option<String>,
        /// Tolerance factor: migrate when avg checkout cost exceeds mu times
        /// the best achievable
        #[arg(long)]
        mu: Option<f64>,
        /// Weight threshold for starting a new partition on commit
        #[arg(long)]
        delta: Option<f64>,
        /// Run the maintenance check every N commits
        #[arg(long = "check-every")]
        check_every: Option<u64>,
    },
    /// Filter one version's records by a conjunction of comparisons
    Run {
        cvd: String,
        #[arg(long)]
        version: String,
        /// Comma-separated conjuncts, e.g. "price>=10,region=eu"
        #[arg(long = "where", default_value = "")]
        predicate: String,
    },
    /// Run the partitioning benchmark described by a JSON config
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Destination CSV for the result rows
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Target {
    /// Staged table name
    #[arg(short = 't', long = "table")]
    table: Option<String>,
    /// CSV file path
    #[arg(short = 'f', long = "file")]
    file: Option<PathBuf>,
}

fn store_root(cli: &Cli) -> StoreRoot {
    let dir = cli
        .root
        .clone()
        .or_else(|| std::env::var_os("CVDSTORE_ROOT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    StoreRoot::new(dir)
}

fn parse_vid(s: &str) -> Result<VersionId, Error> {
    VersionId::parse(s)
}

/// The staged-table name a CSV path maps to.
fn file_stem(path: &std::path::Path) -> Result<String, Error> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(|s| s.to_string())
        .ok_or_else(|| Error::Parameter(format!("bad file name {}", path.display())))
}

fn policy_path(cvd: &Cvd) -> PathBuf {
    cvd.dir().join("policy.json")
}

#[derive(serde::Serialize, serde::Deserialize)]
struct PolicyFile {
    gamma_absolute: Option<u64>,
    gamma_multiple: Option<f64>,
    mu: f64,
    delta_star: f64,
    check_every: u64,
}

fn load_policy(cvd: &Cvd) -> Result<MaintenancePolicy, Error> {
    let path = policy_path(cvd);
    if !path.is_file() {
        return Ok(MaintenancePolicy::default());
    }
    let text = std::fs::read_to_string(&path)?;
    let p: PolicyFile =
        serde_json::from_str(&text).map_err(|e| Error::Parse { line: 0, msg: e.to_string() })?;
    let budget = match (p.gamma_absolute, p.gamma_multiple) {
        (Some(g), _) => StorageBudget::Absolute(g),
        (None, Some(m)) => StorageBudget::MultipleOfRecords(m),
        (None, None) => MaintenancePolicy::default().budget,
    };
    Ok(MaintenancePolicy {
        budget,
        mu: p.mu,
        delta_star: p.delta_star,
        check_every: p.check_every,
    })
}

fn save_policy(cvd: &Cvd, policy: &MaintenancePolicy) -> Result<(), Error> {
    let (ga, gm) = match policy.budget {
        StorageBudget::Absolute(g) => (Some(g), None),
        StorageBudget::MultipleOfRecords(m) => (None, Some(m)),
    };
    let p = PolicyFile {
        gamma_absolute: ga,
        gamma_multiple: gm,
        mu: policy.mu,
        delta_star: policy.delta_star,
        check_every: policy.check_every,
    };
    std::fs::write(policy_path(cvd), serde_json::to_string_pretty(&p).unwrap())?;
    Ok(())
}

fn table_from_csv(
    cvd: &Cvd,
    path: &std::path::Path,
    schema_file: Option<&PathBuf>,
) -> Result<MaterializedTable, Error> {
    let schema_file =
        schema_file.ok_or_else(|| Error::Parameter("schema file required".into()))?;
    let name = file_stem(path)?;
    // provenance comes from the staging entry written at checkout time
    let parent_vids = cvd.get_staging(&name)?.parent_vids;
    let schema = read_schema_file(schema_file)?;
    let rows = read_csv(path, &schema)?;
    Ok(MaterializedTable {
        name,
        schema: schema
            .iter()
            .enumerate()
            .map(|(i, (n, t))| cvdstore::value::Attribute {
                attr_id: i as u32 + 1, // placeholder; commit folds by name
                name: n.clone(),
                dtype: *t,
            })
            .collect(),
        rows: rows.into_iter().map(|r| (None, r)).collect(),
        parent_vids,
    })
}

fn dispatch(cli: &Cli) -> Result<(), Error> {
    let root = store_root(cli);
    match &cli.command {
        Command::Init { name, schema, file, pk } => {
            let schema = read_schema_file(schema)?;
            let rows = match file {
                Some(f) => read_csv(f, &schema)?,
                None => Vec::new(),
            };
            let cvd = init_cvd(&root.cvd_dir(name), name, &schema, pk, &rows)?;
            println!("initialized {} at {} ({} records)", name, VersionId(1), rows.len());
            drop(cvd);
            Ok(())
        }
        Command::Checkout { cvd, versions, target } => {
            let vids: Vec<VersionId> =
                versions.iter().map(|s| parse_vid(s)).collect::<Result<_, _>>()?;
            let mut cvd = Cvd::open_writer(&root.cvd_dir(cvd), cvd)?;
            let dest = match (&target.table, &target.file) {
                (Some(t), None) => t.clone(),
                (None, Some(f)) => file_stem(f)?,
                _ => unreachable!("clap group"),
            };
            let (table, cost) = checkout(&mut cvd, &vids, &dest)?;
            if let Some(f) = &target.file {
                write_csv(&table, f)?;
            }
            println!("checked out {} rows into '{dest}' ({cost} records read)", table.rows.len());
            Ok(())
        }
        Command::Commit { cvd: name, target, message, schema } => {
            let mut cvd = Cvd::open_writer(&root.cvd_dir(name), name)?;
            let table = match (&target.table, &target.file) {
                (Some(t), None) => staged_table(&cvd, t)?,
                (None, Some(f)) => table_from_csv(&cvd, f, schema.as_ref())?,
                _ => unreachable!("clap group"),
            };
            if message.is_empty() {
                eprintln!("warning: empty commit message");
            }
            let policy = load_policy(&cvd)?;
            let vid = commit(&mut cvd, &table, message, &policy)?;
            println!("committed {vid}");
            Ok(())
        }
        Command::Diff { cvd, a, b } => {
            let cvd = Cvd::open_reader(&root.cvd_dir(cvd), cvd)?;
            let d = diff(&cvd, parse_vid(a)?, parse_vid(b)?)?;
            for r in &d.only_in_a {
                println!("- r{}", r.0);
            }
            for r in &d.only_in_b {
                println!("+ r{}", r.0);
            }
            Ok(())
        }
        Command::Ls => {
            for name in root.list_cvds()? {
                println!("{name}");
            }
            Ok(())
        }
        Command::Drop { name } => {
            let live = root.drop_cvd(name)?;
            for staged in live {
                eprintln!("warning: dropped staged checkout '{staged}'");
            }
            println!("dropped {name}");
            Ok(())
        }
        Command::Optimize { cvd: name, gamma, mu, delta, check_every } => {
            let mut cvd = Cvd::open_writer(&root.cvd_dir(name), name)?;
            let mut policy = load_policy(&cvd)?;
            if let Some(g) = gamma {
                policy.budget = match g.strip_suffix('x') {
                    Some(m) => StorageBudget::MultipleOfRecords(
                        m.parse()
                            .map_err(|_| Error::Parameter(format!("bad gamma '{g}'")))?,
                    ),
                    None => StorageBudget::Absolute(
                        g.parse()
                            .map_err(|_| Error::Parameter(format!("bad gamma '{g}'")))?,
                    ),
                };
            }
            if let Some(m) = mu {
                policy.mu = *m;
            }
            if let Some(d) = delta {
                policy.delta_star = *d;
            }
            if let Some(n) = check_every {
                policy.check_every = *n;
            }
            policy.validate()?;
            save_policy(&cvd, &policy)?;

            let graph = cvd.state.version_graph()?;
            let mut current = PartitioningScheme {
                partitions: cvd.state.partition_members().into_values().collect(),
                record_counts: Vec::new(),
                delta: 0.0,
                depth: 0,
            };
            current.partitions.sort();
            current.recount(&graph)?;
            match maintenance_check(&current, &graph, &policy)? {
                CheckOutcome::Ok { current_avg, best_avg } => {
                    let report = estimate_costs(&graph, &current)?;
                    println!(
                        "ok: avg checkout {current_avg:.2} within {}x of best {best_avg:.2}",
                        policy.mu
                    );
                    println!("{}", serde_json::to_string(&report).unwrap());
                }
                CheckOutcome::Migrate { scheme, current_avg, best_avg } => {
                    let plan = plan_migration(&cvd.state.partition_members(), &scheme, &graph)?;
                    let written = execute_migration(&mut cvd, &plan)?;
                    let report = estimate_costs(&graph, &scheme)?;
                    println!(
                        "migrated: avg checkout {current_avg:.2} -> {best_avg:.2} ({written} records written)"
                    );
                    println!("{}", serde_json::to_string(&report).unwrap());
                }
            }
            Ok(())
        }
        Command::Run { cvd: name, version, predicate } => {
            let cvd = Cvd::open_reader(&root.cvd_dir(name), name)?;
            let preds: Vec<Predicate> = predicate
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(Predicate::parse)
                .collect::<Result<_, _>>()?;
            let records = scan_version(&cvd, parse_vid(version)?, &preds)?;
            let names: std::collections::HashMap<u32, &str> = cvd
                .state
                .attributes
                .iter()
                .map(|a| (a.attr_id, a.name.as_str()))
                .collect();
            for r in records {
                let cols: Vec<String> = r
                    .values
                    .iter()
                    .map(|(id, v)| format!("{}={}", names.get(id).unwrap_or(&"?"), v.display()))
                    .collect();
                println!("r{}\t{}", r.rid.0, cols.join("\t"));
            }
            Ok(())
        }
        Command::Bench { config, out } => {
            use cvdstore::bench::{
                generate_workload, materialize_workload, run_partition_experiment,
                write_experiment_csv, ExperimentConfig,
            };
            let text = std::fs::read_to_string(config)?;
            let cfg: ExperimentConfig = serde_json::from_str(&text)
                .map_err(|e| Error::Parse { line: 0, msg: e.to_string() })?;
            let w = generate_workload(&cfg.workload)?;
            let scratch = tempfile::TempDir::new()?;
            let mut cvd = materialize_workload(&scratch.path().join("bench"), "bench", &w)?;
            let points = run_partition_experiment(&mut cvd, &cfg)?;
            write_experiment_csv(&points, out)?;
            for p in &points {
                println!(
                    "{} gamma={} S={} C_avg={:.2} wall_ms={}{}",
                    p.algorithm,
                    p.gamma,
                    p.storage,
                    p.avg_checkout,
                    p.wall_ms,
                    if p.timed_out { " (timed out)" } else { "" }
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Corruption(_) | Error::Consistency(_) | Error::InvariantViolation(_) => {
                    ExitCode::from(2)
                }
                _ => ExitCode::from(1),
            }
        }
    }
}
