//! Helper binary: keeper and launcher processes for sandboxes.

use runtimebox::sandbox::{helper_main, HELPER_ARG};

fn main() {
    let mut args: Vec<_> = std::env::args_os().skip(1).collect();
    if args.first().is_some_and(|a| a == HELPER_ARG) {
        args.remove(0);
    }
    std::process::exit(helper_main(args));
}
