fn main() {
    // Die quietly when a pager or `head` closes the pipe, like any
    // other line-oriented unix tool.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    std::process::exit(specdapt::cli::run());
}
