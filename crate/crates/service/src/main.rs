use activeq_service::{port_from_env, serve_blocking, ServiceConfig};

fn main() {
    let result = port_from_env().and_then(|port| serve_blocking(ServiceConfig::from_env(), port));
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
