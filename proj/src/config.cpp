#include "hoplab/config.hpp"

#include <sstream>

namespace hoplab {

namespace {

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::string position_name(StagePlan::Position p) {
    return p == StagePlan::Position::SubjectLast ? "subject_last" : "last";
}

StagePlan::Position position_from(const std::string& v) {
    if (v == "subject_last") return StagePlan::Position::SubjectLast;
    if (v == "last") return StagePlan::Position::Last;
    throw ConfigError("bad position: " + v);
}

std::pair<int, int> parse_span(const std::string& v) {
    const size_t dash = v.find('-');
    if (dash == std::string::npos) {
        const int l = std::stoi(v);
        return {l, l};
    }
    return {std::stoi(v.substr(0, dash)), std::stoi(v.substr(dash + 1))};
}

}  // namespace

RunConfig RunConfig::defaults() {
    RunConfig c;
    // pilot calibration: shallow stage-1 span at the subject token, deep
    // stage-2 span at the last token; lambda rescaled because C0 is an
    // unnormalized sum over c0_samples keys
    c.model.seed = c.model_seed();
    c.train.seed = c.train_seed();
    c.stage1.prompts = StagePlan::Prompts::SingleHop;
    c.stage1.layer_lo = 1;
    c.stage1.layer_hi = 3;
    c.stage1.position = StagePlan::Position::SubjectLast;
    c.stage2.prompts = StagePlan::Prompts::MultiHop;
    c.stage2.layer_lo = 5;
    c.stage2.layer_hi = 7;
    c.stage2.position = StagePlan::Position::Last;
    c.hyper.lambda = 0.5;
    return c;
}

RunConfig RunConfig::parse_text(const std::string& text) {
    RunConfig c = RunConfig::defaults();
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string stripped = trim(line);
        if (stripped.empty() || stripped[0] == '#') continue;
        const size_t eq = stripped.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        }
        const std::string key = trim(stripped.substr(0, eq));
        const std::string val = trim(stripped.substr(eq + 1));
        try {
            if (key == "seed") c.seed = std::stoull(val);
            else if (key == "out") c.out_dir = val;
            else if (key == "mode") c.mode = val;
            else if (key == "world.entities") c.world_entities = std::stoi(val);
            else if (key == "world.relations") c.world_relations = std::stoi(val);
            else if (key == "world.inferred_frac") c.inferred_frac = std::stod(val);
            else if (key == "model.layers") c.model.n_layers = std::stoi(val);
            else if (key == "model.d_model") c.model.d_model = std::stoi(val);
            else if (key == "model.heads") c.model.n_heads = std::stoi(val);
            else if (key == "model.d_ff") c.model.d_ff = std::stoi(val);
            else if (key == "model.max_seq") c.model.max_seq = std::stoi(val);
            else if (key == "train.steps") c.train.steps = std::stoi(val);
            else if (key == "train.batch") c.train.batch = std::stoi(val);
            else if (key == "train.lr") c.train.lr = std::stod(val);
            else if (key == "train.weight_decay") c.train.weight_decay = std::stod(val);
            else if (key == "train.early_stop_heldout") c.train.early_stop_heldout = std::stod(val);
            else if (key == "train.eval_every") c.train.eval_every = std::stoi(val);
            else if (key == "train.tie_embeddings") c.train.tie_embeddings = val == "true" || val == "1";
            else if (key == "train.position_augmentation") c.train.position_augmentation = val == "true" || val == "1";
            else if (key == "edit.lambda") c.hyper.lambda = std::stod(val);
            else if (key == "edit.mu") c.hyper.mu = std::stod(val);
            else if (key == "edit.phi") c.hyper.phi = std::stod(val);
            else if (key == "edit.phi_late") c.hyper.phi_late = std::stod(val);
            else if (key == "edit.steps") c.hyper.steps = std::stoi(val);
            else if (key == "edit.lr") c.hyper.lr = std::stod(val);
            else if (key == "edit.kl_stop") c.hyper.kl_stop = std::stod(val);
            else if (key == "edit.n_prefixes") c.hyper.n_prefixes = std::stoi(val);
            else if (key == "edit.c0_samples") c.hyper.c0_samples = std::stoi(val);
            else if (key == "stage1.layers") std::tie(c.stage1.layer_lo, c.stage1.layer_hi) = parse_span(val);
            else if (key == "stage1.position") c.stage1.position = position_from(val);
            else if (key == "stage2.layers") std::tie(c.stage2.layer_lo, c.stage2.layer_hi) = parse_span(val);
            else if (key == "stage2.position") c.stage2.position = position_from(val);
            else if (key == "bench.edits") c.n_edits = std::stoi(val);
            else if (key == "probe.cases") c.probe_cases = std::stoi(val);
            else throw ConfigError("unknown config key: " + key);
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception&) {
            throw ConfigError("line " + std::to_string(lineno) + ": bad value for " + key);
        }
    }
    if (c.model.d_model % c.model.n_heads != 0) {
        throw ConfigError("model.d_model must be divisible by model.heads");
    }
    if (c.hyper.mu < 0.0 || c.hyper.mu > 1.0) throw ConfigError("edit.mu must be in [0, 1]");
    if (c.hyper.lambda <= 0.0) throw ConfigError("edit.lambda must be positive");
    if (c.hyper.steps < 1) throw ConfigError("edit.steps must be >= 1");
    c.model.seed = c.model_seed();
    c.train.seed = c.train_seed();
    return c;
}

RunConfig RunConfig::parse_file(const std::string& path) {
    try {
        return parse_text(read_text_file(path));
    } catch (const MissingArtifact& e) {
        throw ConfigError(e.what());
    }
}

std::string RunConfig::to_text() const {
    std::ostringstream out;
    out << "seed = " << seed << "\n";
    out << "out = " << out_dir << "\n";
    out << "mode = " << mode << "\n";
    out << "world.entities = " << world_entities << "\n";
    out << "world.relations = " << world_relations << "\n";
    out << "world.inferred_frac = " << inferred_frac << "\n";
    out << "model.layers = " << model.n_layers << "\n";
    out << "model.d_model = " << model.d_model << "\n";
    out << "model.heads = " << model.n_heads << "\n";
    out << "model.d_ff = " << model.d_ff << "\n";
    out << "model.max_seq = " << model.max_seq << "\n";
    out << "train.steps = " << train.steps << "\n";
    out << "train.batch = " << train.batch << "\n";
    out << "train.lr = " << train.lr << "\n";
    out << "train.weight_decay = " << train.weight_decay << "\n";
    out << "train.early_stop_heldout = " << train.early_stop_heldout << "\n";
    out << "train.eval_every = " << train.eval_every << "\n";
    out << "train.tie_embeddings = " << (train.tie_embeddings ? "true" : "false") << "\n";
    out << "train.position_augmentation = " << (train.position_augmentation ? "true" : "false")
        << "\n";
    out << "edit.lambda = " << hyper.lambda << "\n";
    out << "edit.mu = " << hyper.mu << "\n";
    out << "edit.phi = " << hyper.phi << "\n";
    out << "edit.phi_late = " << hyper.phi_late << "\n";
    out << "edit.steps = " << hyper.steps << "\n";
    out << "edit.lr = " << hyper.lr << "\n";
    out << "edit.kl_stop = " << hyper.kl_stop << "\n";
    out << "edit.n_prefixes = " << hyper.n_prefixes << "\n";
    out << "edit.c0_samples = " << hyper.c0_samples << "\n";
    out << "stage1.layers = " << stage1.layer_lo << "-" << stage1.layer_hi << "\n";
    out << "stage1.position = " << position_name(stage1.position) << "\n";
    out << "stage2.layers = " << stage2.layer_lo << "-" << stage2.layer_hi << "\n";
    out << "stage2.position = " << position_name(stage2.position) << "\n";
    out << "bench.edits = " << n_edits << "\n";
    out << "probe.cases = " << probe_cases << "\n";
    return out.str();
}

}  // namespace hoplab
