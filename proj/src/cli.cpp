#include "ffgan/cli.hpp"

#include "ffgan/container.hpp"
#include "ffgan/error.hpp"
#include "ffgan/evaluation.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

namespace ffgan {

namespace {

std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) {
        return "";
    }
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::string format_double(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double parse_double(const std::string& v)
{
    double out = 0.0;
    const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || end != v.data() + v.size() || v.empty()) {
        throw InvalidArgument("expects a number, got '" + v + "'");
    }
    return out;
}

template <class T>
T parse_whole(const std::string& v)
{
    T out = 0;
    const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || end != v.data() + v.size() || v.empty()) {
        throw InvalidArgument("expects a non-negative integer, got '" + v + "'");
    }
    return out;
}

bool parse_flag(const std::string& v)
{
    if (v == "true" || v == "1") {
        return true;
    }
    if (v == "false" || v == "0") {
        return false;
    }
    throw InvalidArgument("expects true or false, got '" + v + "'");
}

struct Field {
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

Field size_field(std::size_t DatasetSpec::*m)
{
    return {[m](RunConfig& c, const std::string& v) { c.data.*m = parse_whole<std::size_t>(v); },
            [m](const RunConfig& c) { return std::to_string(c.data.*m); }};
}

Field real_field(double DatasetSpec::*m)
{
    return {[m](RunConfig& c, const std::string& v) { c.data.*m = parse_double(v); },
            [m](const RunConfig& c) { return format_double(c.data.*m); }};
}

Field real_field(double TrainConfig::*m)
{
    return {[m](RunConfig& c, const std::string& v) { c.train.*m = parse_double(v); },
            [m](const RunConfig& c) { return format_double(c.train.*m); }};
}

Field flag_field(bool TrainConfig::*m)
{
    return {[m](RunConfig& c, const std::string& v) { c.train.*m = parse_flag(v); },
            [m](const RunConfig& c) { return std::string(c.train.*m ? "true" : "false"); }};
}

Field epoch_field(std::size_t StageEpochs::*m)
{
    return {[m](RunConfig& c, const std::string& v) { c.train.epochs.*m = parse_whole<std::size_t>(v); },
            [m](const RunConfig& c) { return std::to_string(c.train.epochs.*m); }};
}

Field weight_field(std::size_t stage, double LossWeights::*m)
{
    return {[stage, m](RunConfig& c, const std::string& v) { c.train.stage_weights[stage].*m = parse_double(v); },
            [stage, m](const RunConfig& c) { return format_double(c.train.stage_weights[stage].*m); }};
}

const std::vector<std::pair<std::string, Field>>& config_fields()
{
    static const std::vector<std::pair<std::string, Field>> fields = [] {
        std::vector<std::pair<std::string, Field>> f;
        f.emplace_back("seed", Field{[](RunConfig& c, const std::string& v) {
                                         c.data.seed = c.train.seed = parse_whole<std::uint64_t>(v);
                                     },
                                     [](const RunConfig& c) { return std::to_string(c.train.seed); }});
        f.emplace_back("data.n_identities", size_field(&DatasetSpec::n_identities));
        f.emplace_back("data.images_per_identity", size_field(&DatasetSpec::images_per_identity));
        f.emplace_back("data.image_size", size_field(&DatasetSpec::image_size));
        f.emplace_back("data.d_id", size_field(&DatasetSpec::d_id));
        f.emplace_back("data.d_exp", size_field(&DatasetSpec::d_exp));
        f.emplace_back("data.d_tex", size_field(&DatasetSpec::d_tex));
        f.emplace_back("data.n_vertices", size_field(&DatasetSpec::n_vertices));
        f.emplace_back("data.n_landmarks", size_field(&DatasetSpec::n_landmarks));
        f.emplace_back("data.yaw_max_deg", real_field(&DatasetSpec::yaw_max_deg));
        f.emplace_back("data.yaw_step_deg", real_field(&DatasetSpec::yaw_step_deg));
        f.emplace_back("data.gain_min", real_field(&DatasetSpec::gain_min));
        f.emplace_back("data.gain_max", real_field(&DatasetSpec::gain_max));
        f.emplace_back("data.holdout_period", size_field(&DatasetSpec::holdout_period));
        f.emplace_back("batch_size", Field{[](RunConfig& c, const std::string& v) {
                                               c.train.batch_size = parse_whole<std::size_t>(v);
                                           },
                                           [](const RunConfig& c) { return std::to_string(c.train.batch_size); }});
        f.emplace_back("beta1", real_field(&TrainConfig::beta1));
        f.emplace_back("beta2", real_field(&TrainConfig::beta2));
        f.emplace_back("adam_eps", real_field(&TrainConfig::adam_eps));
        f.emplace_back("lr_pretrain", real_field(&TrainConfig::lr_pretrain));
        f.emplace_back("lr_gd", real_field(&TrainConfig::lr_gd));
        f.emplace_back("lr_joint", real_field(&TrainConfig::lr_joint));
        f.emplace_back("pose_weight", real_field(&TrainConfig::pose_weight));
        f.emplace_back("r_through_g", flag_field(&TrainConfig::r_through_g));
        f.emplace_back("analytic_flip", flag_field(&TrainConfig::analytic_flip));
        f.emplace_back("ablation", Field{[](RunConfig& c, const std::string& v) { c.train.ablation = ablation_from_name(v); },
                                         [](const RunConfig& c) { return ablation_name(c.train.ablation); }});
        f.emplace_back("epochs.pretrain_r", epoch_field(&StageEpochs::pretrain_r));
        f.emplace_back("epochs.pretrain_c", epoch_field(&StageEpochs::pretrain_c));
        f.emplace_back("epochs.stage1", epoch_field(&StageEpochs::stage1));
        f.emplace_back("epochs.stage2", epoch_field(&StageEpochs::stage2));
        f.emplace_back("epochs.stage3", epoch_field(&StageEpochs::stage3));
        const std::pair<const char*, double LossWeights::*> terms[] = {
            {"rec", &LossWeights::rec}, {"tv", &LossWeights::tv}, {"sym", &LossWeights::sym},
            {"gan", &LossWeights::gan}, {"id", &LossWeights::id}};
        for (std::size_t s = 0; s < 3; ++s) {
            for (const auto& [name, m] : terms) {
                f.emplace_back("stage" + std::to_string(s + 1) + ".lambda_" + name, weight_field(s, m));
            }
        }
        return f;
    }();
    return fields;
}

std::string read_text(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw InvalidArgument("cannot read '" + path + "'");
    }
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

/// Copies every character to two streams.
class TeeBuf : public std::streambuf {
public:
    TeeBuf(std::streambuf* a, std::streambuf* b) : a_(a), b_(b) {}

protected:
    int overflow(int c) override
    {
        if (c == traits_type::eof()) {
            return traits_type::not_eof(c);
        }
        const auto ch = traits_type::to_char_type(c);
        if (a_->sputc(ch) == traits_type::eof() || b_->sputc(ch) == traits_type::eof()) {
            return traits_type::eof();
        }
        return c;
    }
    int sync() override { return a_->pubsync() | b_->pubsync(); }

private:
    std::streambuf* a_;
    std::streambuf* b_;
};

/// Progress stream: echoes to `out` and keeps a copy for the machine log.
struct Progress {
    explicit Progress(std::ostream& out) : tee(out.rdbuf(), copy.rdbuf()), stream(&tee) {}
    std::ostringstream copy;
    TeeBuf tee;
    std::ostream stream;

    void save(const std::string& out_path) { write_file_atomic(out_path + ".log", copy.str()); }
};

struct Options {
    std::optional<std::uint64_t> seed;
    std::string config, dataset, out, checkpoint, reconstructor, recognizer, ablate, mode = "syn", file;
    std::vector<std::size_t> stage_epochs;
    std::size_t count = 4;
};

RunConfig resolve(const Options& o, RunConfig base)
{
    if (!o.config.empty()) {
        apply_config_text(read_text(o.config), base);
    }
    if (o.seed) {
        base.data.seed = base.train.seed = *o.seed;
    }
    if (!o.stage_epochs.empty()) {
        if (o.stage_epochs.size() != 3) {
            throw InvalidArgument("--stage-epochs expects three counts a,b,c");
        }
        base.train.epochs.stage1 = o.stage_epochs[0];
        base.train.epochs.stage2 = o.stage_epochs[1];
        base.train.epochs.stage3 = o.stage_epochs[2];
    }
    if (!o.ablate.empty()) {
        base.train.ablation = ablation_from_name(o.ablate);
    }
    base.data.validate();
    base.train.validate();
    return base;
}

NetworkParams read_params(const std::string& path, const std::string& prefix)
{
    return params_from_records(read_container(path), prefix);
}

void write_params(const std::string& path, const NetworkParams& net, const std::string& prefix)
{
    write_container(path, params_records(net, prefix));
}

} // namespace

void apply_config_text(const std::string& text, RunConfig& config)
{
    std::map<std::string, const Field*> by_name;
    for (const auto& [name, field] : config_fields()) {
        by_name[name] = &field;
    }
    std::map<std::string, std::size_t> seen;
    std::istringstream in(text);
    std::string raw;
    RunConfig next = config;
    for (std::size_t line_no = 1; std::getline(in, raw); ++line_no) {
        const std::string line = trim(raw);
        if (line.empty() || line.front() == '#') {
            continue;
        }
        const std::string where = "config line " + std::to_string(line_no) + ": ";
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw InvalidArgument(where + "expected key = value");
        }
        const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        const auto it = by_name.find(key);
        if (it == by_name.end()) {
            throw InvalidArgument(where + "unknown key '" + key + "'");
        }
        if (const auto [prev, fresh] = seen.emplace(key, line_no); !fresh) {
            throw InvalidArgument(where + "'" + key + "' already set on line " + std::to_string(prev->second));
        }
        try {
            it->second->set(next, value);
        } catch (const InvalidArgument& e) {
            throw InvalidArgument(where + "'" + key + "' " + e.what());
        }
    }
    config = next;
}

std::string config_text(const RunConfig& config)
{
    std::string out;
    for (const auto& [name, field] : config_fields()) {
        out += name + " = " + field.get(config) + "\n";
    }
    return out;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Face frontalization GAN at desk scale", "ffgan"};
    app.require_subcommand(1);
    Options o;

    const auto common = [&](CLI::App* cmd) {
        cmd->add_option("--seed", o.seed, "Seed for data generation and training");
        cmd->add_option("--config", o.config, "key = value config file")->check(CLI::ExistingFile);
    };
    const auto dataset = [&](CLI::App* cmd) {
        cmd->add_option("--dataset", o.dataset, "Dataset container")->required();
    };
    const auto output = [&](CLI::App* cmd, const std::string& what) {
        cmd->add_option("--out", o.out, what)->required();
    };

    CLI::App* gen = app.add_subcommand("gen-data", "Render the synthetic face dataset");
    common(gen);
    output(gen, "Dataset container to write");

    CLI::App* pre_r = app.add_subcommand("pretrain-r", "Pretrain the coefficient reconstructor");
    common(pre_r);
    dataset(pre_r);
    output(pre_r, "Reconstructor parameters to write");

    CLI::App* pre_c = app.add_subcommand("pretrain-c", "Pretrain the identity recognizer");
    common(pre_c);
    dataset(pre_c);
    output(pre_c, "Recognizer parameters to write");

    CLI::App* train = app.add_subcommand("train", "Joint adversarial training");
    common(train);
    dataset(train);
    output(train, "Checkpoint to write");
    train->add_option("--reconstructor", o.reconstructor, "Pretrained reconstructor parameters");
    train->add_option("--recognizer", o.recognizer, "Pretrained recognizer parameters");
    train->add_option("--checkpoint", o.checkpoint, "Checkpoint to resume from");
    train->add_option("--stage-epochs", o.stage_epochs, "Joint epochs of stages 1,2,3")->delimiter(',');
    train->add_option("--ablate", o.ablate, "Component to remove")->check(CLI::IsMember(ablation_names()));

    CLI::App* eval = app.add_subcommand("eval", "Landmark error, frontalization error and rank-1 identification");
    common(eval);
    dataset(eval);
    output(eval, "Report to write");
    eval->add_option("--checkpoint", o.checkpoint, "Trained checkpoint")->required();
    eval->add_option("--mode", o.mode, "Matching mode echoed to standard output")
        ->check(CLI::IsMember({"original", "syn", "synthesized", "fused"}));

    CLI::App* ablate = app.add_subcommand("ablate", "Train the full model and the six variants");
    common(ablate);
    dataset(ablate);
    output(ablate, "Ablation table to write");
    ablate->add_option("--reconstructor", o.reconstructor, "Pretrained reconstructor parameters")->required();
    ablate->add_option("--recognizer", o.recognizer, "Pretrained recognizer parameters")->required();
    ablate->add_option("--stage-epochs", o.stage_epochs, "Joint epochs of stages 1,2,3")->delimiter(',');

    CLI::App* grid = app.add_subcommand("export-grid", "Write a PGM mosaic of held-out frontalizations");
    common(grid);
    dataset(grid);
    output(grid, "PGM file to write");
    grid->add_option("--checkpoint", o.checkpoint, "Trained checkpoint")->required();
    grid->add_option("--count", o.count, "Number of held-out samples")->check(CLI::PositiveNumber);

    CLI::App* inspect = app.add_subcommand("inspect", "List the records of a container without decoding payloads");
    inspect->add_option("file", o.file, "Container file")->required();
    common(inspect);

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            out << (e.get_name() == "CallForAllHelp" ? app.help("", CLI::AppFormatMode::All) : app.help());
            return kExitOk;
        }
        err << "error: " << e.what() << "\n";
        CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        err << sub->help();
        return kExitUsage;
    }

    RunConfig config;
    std::optional<TrainState> loaded;
    try {
        if (!o.checkpoint.empty()) {
            loaded.emplace(load_checkpoint(o.checkpoint, &config.train));
        } else if (train->parsed() && (o.reconstructor.empty() || o.recognizer.empty())) {
            throw InvalidArgument("train needs --reconstructor and --recognizer, or --checkpoint to resume");
        }
        config = resolve(o, config);
    } catch (const FormatError& e) {
        err << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const InvalidArgument& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    }

    try {
        if (gen->parsed()) {
            const Dataset data = generate_dataset(config.data);
            write_dataset(data, o.out);
            out << "wrote " << data.samples.size() << " samples to " << o.out << "\n";
        } else if (inspect->parsed()) {
            const std::vector<RecordHeader> headers = scan_container(o.file);
            for (const RecordHeader& h : headers) {
                out << h.name << " " << to_string(h.shape) << "\n";
            }
            out << headers.size() << " records\n";
        } else {
            const Dataset data = read_dataset(o.dataset);
            if (pre_r->parsed() || pre_c->parsed()) {
                Progress progress(out);
                const bool is_r = pre_r->parsed();
                const PretrainResult r = is_r ? pretrain_R(config.train, data, &progress.stream)
                                              : pretrain_C(config.train, data, &progress.stream);
                write_params(o.out, r.net, is_r ? "r" : "c");
                progress.stream << (is_r ? "heldout_nme=" : "heldout_accuracy=") << format_double(r.heldout)
                                << (is_r ? " baseline_nme=" : " chance=") << format_double(r.baseline) << "\n";
                progress.save(o.out);
            } else if (train->parsed()) {
                Progress progress(out);
                TrainState state = loaded ? std::move(*loaded)
                                          : init_joint(config.train, data, read_params(o.reconstructor, "r"),
                                                       read_params(o.recognizer, "c"));
                train_epochs(state, config.train, data, config.train.epochs.joint(), &progress.stream);
                save_checkpoint(state, config.train, o.out);
                progress.save(o.out);
            } else if (eval->parsed()) {
                const EvalReport report = evaluate(*loaded, config.train, data);
                write_file_atomic(o.out, report.to_text());
                const FeatureMode mode = feature_mode_from_name(o.mode);
                const Rank1Result& r = report.rank1[static_cast<std::size_t>(mode)];
                out << "nme=" << format_double(report.nme) << " heldout_l1=" << format_double(report.heldout_l1)
                    << " rank1." << feature_mode_name(mode) << ".avg=" << format_double(r.average) << "\n";
            } else if (ablate->parsed()) {
                Progress progress(out);
                const std::vector<AblationRow> table = run_ablation(
                    config.train, data, read_params(o.reconstructor, "r"), read_params(o.recognizer, "c"), &progress.stream);
                std::string text;
                for (const AblationRow& row : table) {
                    text += "ablation." + row.name + ".syn_avg=" + format_double(row.syn_average) + "\n";
                    text += "ablation." + row.name + ".data_hash=" + std::to_string(row.data_hash) + "\n";
                    text += "ablation." + row.name + ".seed=" + std::to_string(row.seed) + "\n";
                }
                write_file_atomic(o.out, text);
                progress.save(o.out);
            } else if (grid->parsed()) {
                std::vector<std::size_t> idx = data.indices(true);
                idx.resize(std::min(idx.size(), o.count));
                export_grid(grid_rows(*loaded, config.train, data, idx), o.out);
                out << "wrote " << idx.size() << " rows to " << o.out << "\n";
            }
        }
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitOk;
}

} // namespace ffgan
