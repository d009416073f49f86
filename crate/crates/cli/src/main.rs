fn main() {
    maskgram_cli::apply_thread_cap();
    std::process::exit(maskgram_cli::run(std::env::args_os()));
}
