//! The `maps` command line.
//!
//! Parsing produces an [`Action`]; [`execute`] carries it out. Exit codes:
//! 0 on success, 1 for user errors, 2 for environment errors, and for
//! `--run` the command's own status.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{ArgGroup, Args, Parser, Subcommand};
use runtimebox::deploy::{self, Deployment};
use runtimebox::refmodel::parse_runtime_ref;
use runtimebox::remote::{self, PullOptions};
use runtimebox::sandbox::{self, Bind, Helper, HostContext};
use runtimebox::{packager, Error, Paths, Repo, Result, RuntimeRef};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_ENVIRONMENT: i32 = 2;

/// What one invocation asks for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Deploy {
        reference: RuntimeRef,
        remote: Option<String>,
    },
    Run(RunRequest),
    Update {
        reference: RuntimeRef,
        remote: Option<String>,
    },
    Reset {
        reference: RuntimeRef,
    },
    List {
        json: bool,
    },
    Remove {
        reference: RuntimeRef,
    },
    PackageInitialise {
        tree: PathBuf,
    },
    PackageSandbox {
        tree: PathBuf,
        command: Option<String>,
    },
    PackageCommit {
        reference: RuntimeRef,
        tree: PathBuf,
        subject: Option<String>,
    },
    RemoteAdd {
        name: String,
        url: String,
    },
    RemoteList,
    RemoteRemove {
        name: String,
    },
    RepoExport {
        dest: PathBuf,
    },
    RepoFsck,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunRequest {
    pub reference: RuntimeRef,
    pub command: Option<String>,
    pub binds: Vec<Bind>,
    pub dry_run: bool,
    pub json: bool,
}

#[derive(Debug, Parser)]
#[command(
    name = "maps",
    version,
    about = "Deploy, run and author reproducible software runtimes",
    args_conflicts_with_subcommands = true,
    group(ArgGroup::new("mode").args(["deploy", "run", "update", "reset", "list", "remove"])),
    after_help = "Runtime references have the form NAME/ARCH/VERSION; VERSION may be `latest`.\n\
                  Environment: HOME, XDG_DATA_HOME, RUNTIMEBOX_DATA_HOME, RUNTIMEBOX_STATE_HOME."
)]
struct Cli {
    /// Fetch REF from a remote and check it out
    #[arg(short = 'd', long, value_name = "REF")]
    deploy: Option<String>,

    /// Run the command of deployed REF in a sandbox
    #[arg(short = 'r', long, value_name = "REF")]
    run: Option<String>,

    /// Move deployed REF to its newest commit, keeping local changes
    #[arg(long, value_name = "REF")]
    update: Option<String>,

    /// Discard local changes to deployed REF
    #[arg(long, value_name = "REF")]
    reset: Option<String>,

    /// List deployments
    #[arg(long)]
    list: bool,

    /// Delete the deployment of REF
    #[arg(long, value_name = "REF")]
    remove: Option<String>,

    /// Command to run instead of the manifest's (with --run)
    #[arg(long, value_name = "CMD")]
    command: Option<String>,

    /// Extra bind mount HOST:RUNTIME[:ro|:rw] (with --run, repeatable)
    #[arg(long, value_name = "HOST:RUNTIME")]
    bind: Vec<String>,

    /// Print the execution plan instead of running (with --run)
    #[arg(long)]
    dry_run: bool,

    /// Machine-readable output for --list and --dry-run
    #[arg(long)]
    json: bool,

    /// Remote to use with --deploy or --update
    #[arg(long, value_name = "NAME")]
    remote: Option<String>,

    #[command(subcommand)]
    sub: Option<Sub>,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Author new runtimes
    Package(PackageArgs),
    /// Manage remotes
    #[command(subcommand)]
    Remote(RemoteCmd),
    /// Repository maintenance
    #[command(subcommand)]
    Repo(RepoCmd),
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("step").required(true).args(["initialise", "sandbox", "commit"])))]
struct PackageArgs {
    /// Prepare PATH (a root filesystem tree) for authoring
    #[arg(long, value_name = "PATH")]
    initialise: Option<PathBuf>,

    /// Open a writable sandbox with PATH as its root
    #[arg(long, value_name = "PATH")]
    sandbox: Option<PathBuf>,

    /// Commit the tree at PATH as REF
    #[arg(long, num_args = 2, value_names = ["REF", "PATH"])]
    commit: Option<Vec<String>>,

    /// Command to run instead of a login shell (with --sandbox)
    #[arg(long, value_name = "CMD", requires = "sandbox")]
    command: Option<String>,

    /// Commit subject (with --commit)
    #[arg(short = 'm', long, value_name = "TEXT", requires = "commit")]
    subject: Option<String>,
}

#[derive(Debug, Subcommand)]
enum RemoteCmd {
    /// Register a mirror URL under NAME
    Add { name: String, url: String },
    /// Show configured remotes
    List,
    /// Forget a remote
    Remove { name: String },
}

#[derive(Debug, Subcommand)]
enum RepoCmd {
    /// Publish the repository as a static mirror in PATH
    Export { path: PathBuf },
    /// Verify every object and reference
    Fsck,
}

/// Outcome of parsing: an action, or text to print (help, version) or a
/// usage error.
#[derive(Debug)]
pub enum Parsed {
    Action(Action),
    Exit {
        code: i32,
        message: String,
        to_stderr: bool,
    },
}

fn reference(text: &str) -> std::result::Result<RuntimeRef, Error> {
    parse_runtime_ref(text)
}

fn to_action(cli: Cli) -> std::result::Result<Action, Error> {
    if let Some(sub) = cli.sub {
        return Ok(match sub {
            Sub::Package(p) => {
                if let Some(tree) = p.initialise {
                    Action::PackageInitialise { tree }
                } else if let Some(tree) = p.sandbox {
                    Action::PackageSandbox {
                        tree,
                        command: p.command,
                    }
                } else {
                    let args = p.commit.unwrap_or_default();
                    Action::PackageCommit {
                        reference: reference(&args[0])?,
                        tree: PathBuf::from(&args[1]),
                        subject: p.subject,
                    }
                }
            }
            Sub::Remote(RemoteCmd::Add { name, url }) => Action::RemoteAdd { name, url },
            Sub::Remote(RemoteCmd::List) => Action::RemoteList,
            Sub::Remote(RemoteCmd::Remove { name }) => Action::RemoteRemove { name },
            Sub::Repo(RepoCmd::Export { path }) => Action::RepoExport { dest: path },
            Sub::Repo(RepoCmd::Fsck) => Action::RepoFsck,
        });
    }
    let remote = cli.remote;
    Ok(if let Some(r) = cli.deploy {
        Action::Deploy {
            reference: reference(&r)?,
            remote,
        }
    } else if let Some(r) = cli.run {
        Action::Run(RunRequest {
            reference: reference(&r)?,
            command: cli.command,
            binds: cli.bind.iter().map(|b| Bind::parse(b)).collect::<Result<_>>()?,
            dry_run: cli.dry_run,
            json: cli.json,
        })
    } else if let Some(r) = cli.update {
        Action::Update {
            reference: reference(&r)?,
            remote,
        }
    } else if let Some(r) = cli.reset {
        Action::Reset {
            reference: reference(&r)?,
        }
    } else if cli.list {
        Action::List { json: cli.json }
    } else if let Some(r) = cli.remove {
        Action::Remove {
            reference: reference(&r)?,
        }
    } else {
        unreachable!("checked by parse")
    })
}

/// Flag combinations clap's declarations cannot express.
fn misuse(cli: &Cli) -> Option<(clap::error::ErrorKind, &'static str)> {
    use clap::error::ErrorKind;
    if !has_action(cli) {
        return Some((
            ErrorKind::MissingRequiredArgument,
            "one of --deploy, --run, --update, --reset, --list, --remove or a subcommand is required",
        ));
    }
    let running = cli.run.is_some();
    if !running && (cli.command.is_some() || !cli.bind.is_empty() || cli.dry_run) {
        return Some((
            ErrorKind::ArgumentConflict,
            "--command, --bind and --dry-run only apply to --run",
        ));
    }
    if cli.json && !(cli.list || cli.dry_run) {
        return Some((
            ErrorKind::ArgumentConflict,
            "--json only applies to --list and --run --dry-run",
        ));
    }
    if cli.remote.is_some() && cli.deploy.is_none() && cli.update.is_none() {
        return Some((
            ErrorKind::ArgumentConflict,
            "--remote only applies to --deploy and --update",
        ));
    }
    None
}

fn has_action(cli: &Cli) -> bool {
    cli.sub.is_some()
        || cli.list
        || [&cli.deploy, &cli.run, &cli.update, &cli.reset, &cli.remove]
            .iter()
            .any(|o| o.is_some())
}

/// Parse a full argument vector (including the program name).
pub fn parse<I, T>(args: I) -> Parsed
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USER } else { EXIT_OK };
            return Parsed::Exit {
                code,
                message: e.render().to_string(),
                to_stderr: e.use_stderr(),
            };
        }
    };
    if let Some((kind, message)) = misuse(&cli) {
        use clap::CommandFactory;
        let e = Cli::command().error(kind, message);
        return Parsed::Exit {
            code: EXIT_USER,
            message: e.render().to_string(),
            to_stderr: true,
        };
    }
    match to_action(cli) {
        Ok(action) => Parsed::Action(action),
        Err(e) => Parsed::Exit {
            code: exit_code(&e),
            message: diagnostic(&e),
            to_stderr: true,
        },
    }
}

/// Full help text, as printed by `maps --help`.
pub fn help_text() -> String {
    use clap::CommandFactory;
    let mut out = Cli::command().render_long_help().to_string();
    for sub in ["package", "remote", "repo"] {
        let mut cmd = Cli::command();
        let sub = cmd.find_subcommand_mut(sub).expect("known subcommand");
        out.push('\n');
        out.push_str(&sub.render_long_help().to_string());
    }
    out
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_environmental() {
        EXIT_ENVIRONMENT
    } else {
        EXIT_USER
    }
}

/// Single-line diagnostic naming the error kind.
pub fn diagnostic(err: &Error) -> String {
    let text = err.to_string().replace('\n', " ");
    format!("maps: error[{}]: {text}\n", err.kind_name())
}

/// Everything an action needs from its surroundings.
pub struct Context<'a> {
    pub paths: Paths,
    pub host: HostContext,
    pub helper: Helper,
    pub pull: PullOptions,
    pub out: &'a mut dyn Write,
}

impl Context<'_> {
    fn repo(&self) -> Result<Repo> {
        Repo::init(&self.paths.repo)
    }

    fn open_repo(&self) -> Result<Repo> {
        Repo::open(&self.paths.repo)
    }

    fn say(&mut self, text: impl AsRef<str>) -> Result<()> {
        self.out
            .write_all(text.as_ref().as_bytes())
            .map_err(|e| Error::Io {
                context: "writing output".into(),
                source: e,
            })
    }
}

/// Explicit remote, else the first configured one, else none (local refs).
fn pick_remote(repo: &Repo, explicit: Option<&str>) -> Result<Option<String>> {
    if let Some(name) = explicit {
        remote::get_remote(repo, name)?;
        return Ok(Some(name.to_string()));
    }
    Ok(remote::list_remotes(repo)?.into_iter().next().map(|r| r.name))
}

fn now() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs() as i64)
}

/// Carry out `action`. Returns the process exit code.
pub fn execute(action: Action, ctx: &mut Context) -> Result<i32> {
    match action {
        Action::Deploy { reference, remote } => {
            let repo = ctx.repo()?;
            let remote = pick_remote(&repo, remote.as_deref())?;
            let d = deploy::deploy(
                &repo,
                &ctx.paths.state_root,
                remote.as_deref(),
                &reference,
                &ctx.pull,
            )?;
            ctx.say(format!(
                "deployed {} ({}) at {}\n",
                d.resolved,
                d.commit.short(),
                d.base.display()
            ))?;
        }
        Action::Run(req) => {
            let d = Deployment::open(&ctx.paths.state_root, &req.reference)?;
            if req.dry_run {
                let manifest = sandbox::read_manifest(&d)?;
                let plan = sandbox::build_plan(
                    &d,
                    manifest.as_ref(),
                    req.command.as_deref(),
                    &req.binds,
                    &ctx.host,
                )?;
                let text = if req.json { plan.to_json() } else { plan.to_text() };
                ctx.say(text)?;
                return Ok(EXIT_OK);
            }
            ctx.out.flush().ok();
            return sandbox::run(&d, req.command.as_deref(), &req.binds, &ctx.host, &ctx.helper);
        }
        Action::Update { reference, remote } => {
            let repo = ctx.repo()?;
            let d = Deployment::open(&ctx.paths.state_root, &reference)?;
            if let Some(name) = &remote {
                remote::get_remote(&repo, name)?;
            }
            let (d, changed) = deploy::update(&repo, &d, remote.as_deref(), &ctx.pull)?;
            if changed {
                ctx.say(format!(
                    "updated {} to {} ({})\n",
                    d.reference,
                    d.resolved,
                    d.commit.short()
                ))?;
            } else {
                ctx.say(format!("{} is up to date ({})\n", d.reference, d.commit.short()))?;
            }
        }
        Action::Reset { reference } => {
            let d = Deployment::open(&ctx.paths.state_root, &reference)?;
            deploy::reset(&d)?;
            ctx.say(format!("reset {reference}\n"))?;
        }
        Action::List { json } => {
            let list = deploy::list_deployments(&ctx.paths.state_root)?;
            if json {
                let rows: Vec<_> = list
                    .iter()
                    .map(|i| {
                        serde_json::json!({
                            "ref": i.reference.to_string(),
                            "commit": i.commit.to_hex(),
                            "pristine": i.pristine,
                        })
                    })
                    .collect();
                let mut text = serde_json::to_string_pretty(&rows).expect("plain json");
                text.push('\n');
                ctx.say(text)?;
            } else {
                let width = list
                    .iter()
                    .map(|i| i.reference.to_string().len())
                    .max()
                    .unwrap_or(0)
                    .max(3);
                let mut text = format!("{:<width$}  {:<12}  PRISTINE\n", "REF", "COMMIT");
                for i in &list {
                    text.push_str(&format!(
                        "{:<width$}  {:<12}  {}\n",
                        i.reference.to_string(),
                        i.commit.short(),
                        if i.pristine { "yes" } else { "no" }
                    ));
                }
                ctx.say(text)?;
            }
        }
        Action::Remove { reference } => {
            let d = Deployment::open(&ctx.paths.state_root, &reference)?;
            deploy::remove(&d)?;
            ctx.say(format!("removed {reference}\n"))?;
        }
        Action::PackageInitialise { tree } => {
            let changed = packager::initialise(&tree)?;
            let verb = if changed {
                "initialised"
            } else {
                "already initialised:"
            };
            ctx.say(format!("{verb} {}\n", tree.display()))?;
        }
        Action::PackageSandbox { tree, command } => {
            ctx.out.flush().ok();
            return packager::author_sandbox(&tree, command.as_deref(), &ctx.host, &ctx.helper);
        }
        Action::PackageCommit {
            reference,
            tree,
            subject,
        } => {
            let repo = ctx.repo()?;
            let subject = subject.unwrap_or_else(|| format!("Commit {reference}"));
            let id = packager::commit_runtime(&repo, &reference, &tree, &subject, now())?;
            ctx.say(format!("committed {reference} as {id}\n"))?;
        }
        Action::RemoteAdd { name, url } => {
            let repo = ctx.repo()?;
            let r = remote::add_remote(&repo, &name, &url)?;
            ctx.say(format!("{}\t{}\n", r.name, r.url))?;
        }
        Action::RemoteList => {
            let repo = ctx.repo()?;
            let text: String = remote::list_remotes(&repo)?
                .iter()
                .map(|r| format!("{}\t{}\n", r.name, r.url))
                .collect();
            ctx.say(text)?;
        }
        Action::RemoteRemove { name } => {
            let repo = ctx.open_repo()?;
            remote::remove_remote(&repo, &name)?;
            ctx.say(format!("removed remote {name}\n"))?;
        }
        Action::RepoExport { dest } => {
            let repo = ctx.open_repo()?;
            remote::export(&repo, &dest)?;
            ctx.say(format!("exported to {}\n", dest.display()))?;
        }
        Action::RepoFsck => {
            let report = ctx.open_repo()?.fsck()?;
            if !report.is_clean() {
                return Err(Error::FsckFailed(report));
            }
            ctx.say(format!("ok: {report}\n"))?;
        }
    }
    Ok(EXIT_OK)
}

/// Entry point behind `main`: parse, execute, report.
pub fn main_with(args: Vec<OsString>) -> i32 {
    if args.get(1).is_some_and(|a| a == sandbox::HELPER_ARG) {
        return sandbox::helper_main(args[2..].to_vec());
    }
    let action = match parse(args) {
        Parsed::Action(action) => action,
        Parsed::Exit {
            code,
            message,
            to_stderr,
        } => {
            if to_stderr {
                eprint!("{message}");
            } else {
                print!("{message}");
            }
            return code;
        }
    };
    let result = Paths::from_env().and_then(|paths| {
        let helper = Helper::locate()?;
        let stdout = std::io::stdout();
        let mut lock = stdout.lock();
        let mut ctx = Context {
            host: HostContext::current(&paths),
            paths,
            helper,
            pull: PullOptions::default(),
            out: &mut lock,
        };
        execute(action, &mut ctx)
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprint!("{}", diagnostic(&e));
            exit_code(&e)
        }
    }
}
