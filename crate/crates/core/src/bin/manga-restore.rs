fn main() {
    std::process::exit(manga_restore::cli::run(std::env::args_os()));
}
