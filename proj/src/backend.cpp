#include "ipck/backend.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdlib>
#include <fstream>

namespace ipck {

T5Config T5Config::from_file(const std::filesystem::path& config_json)
{
    std::ifstream in(config_json);
    if (!in)
        throw DataError("cannot open " + config_json.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(config_json.string() + ": " + e.what());
    }
    T5Config c;
    try {
        c.vocab_size = j.at("vocab_size").get<int>();
        c.d_model = j.at("d_model").get<int>();
        c.d_kv = j.at("d_kv").get<int>();
        c.d_ff = j.at("d_ff").get<int>();
        c.num_layers = j.at("num_layers").get<int>();
        c.num_decoder_layers = j.value("num_decoder_layers", c.num_layers);
        if (j.contains("num_decoder_layers") && j["num_decoder_layers"].is_null())
            c.num_decoder_layers = c.num_layers;
        c.num_heads = j.at("num_heads").get<int>();
        c.relative_buckets = j.value("relative_attention_num_buckets", 32);
        c.relative_max_distance = j.value("relative_attention_max_distance", 128);
        c.layer_norm_eps = j.value("layer_norm_epsilon", 1e-6);
        c.tie_word_embeddings = j.value("tie_word_embeddings", true);
        c.scale_decoder_outputs = j.value("scale_decoder_outputs", c.tie_word_embeddings);
        c.decoder_start_token_id = j.value("decoder_start_token_id", 0);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(config_json.string() + ": " + e.what());
    }
    const std::string proj = j.value("feed_forward_proj", std::string("relu"));
    std::string act = proj;
    if (proj.rfind("gated-", 0) == 0) {
        c.gated = true;
        act = proj.substr(6);
    }
    if (act == "gelu" && c.gated)
        act = "gelu_new"; // the reference maps gated-gelu to the tanh approximation
    if (act == "relu")
        c.activation = Activation::relu;
    else if (act == "gelu_new")
        c.activation = Activation::gelu_tanh;
    else if (act == "gelu")
        c.activation = Activation::gelu_erf;
    else
        throw DataError(config_json.string() + ": unsupported feed_forward_proj " + proj);
    return c;
}

int relative_position_bucket(int relative_position, bool bidirectional, int num_buckets, int max_distance)
{
    int ret = 0;
    int n = num_buckets;
    int rp = relative_position;
    if (bidirectional) {
        n /= 2;
        if (rp > 0)
            ret += n;
        rp = std::abs(rp);
    } else {
        rp = -std::min(rp, 0);
    }
    const int max_exact = n / 2;
    if (rp < max_exact)
        return ret + rp;
    const float a = std::log(static_cast<float>(rp) / static_cast<float>(max_exact));
    const float b = static_cast<float>(std::log(static_cast<double>(max_distance) / max_exact));
    const float v = a / b * static_cast<float>(n - max_exact);
    const int large = std::min(max_exact + static_cast<int>(v), n - 1);
    return ret + large;
}

std::string to_string(TuneMode m) { return m == TuneMode::full ? "full" : "prompt_only"; }

TuneMode parse_tune_mode(std::string_view s)
{
    if (s == "full")
        return TuneMode::full;
    if (s == "prompt_only")
        return TuneMode::prompt_only;
    throw ConfigError("train.tune_mode must be 'full' or 'prompt_only', got '" + std::string(s) + "'");
}

std::filesystem::path resolve_model_dir(const std::string& model_id)
{
    namespace fs = std::filesystem;
    auto usable = [](const fs::path& p) { return fs::is_directory(p) && fs::exists(p / "config.json"); };
    if (model_id.empty())
        throw ConfigError("backend.model_id is empty");
    if (usable(model_id))
        return model_id;
    std::vector<fs::path> tried{model_id};
    if (const char* cache = std::getenv("IPCK_CACHE_DIR")) {
        std::string flat = model_id;
        for (std::size_t at = flat.find('/'); at != std::string::npos; at = flat.find('/', at + 2))
            flat.replace(at, 1, "--");
        for (const auto& p : {fs::path(cache) / model_id, fs::path(cache) / flat}) {
            if (usable(p))
                return p;
            tried.push_back(p);
        }
    }
    std::string msg = "backend.model_id '" + model_id + "' not found (tried";
    for (const auto& p : tried)
        msg += " " + p.string();
    msg += "); give a checkpoint directory or set IPCK_CACHE_DIR";
    throw ConfigError(msg);
}

std::size_t utf8_floor(std::string_view s, std::size_t limit)
{
    if (limit >= s.size())
        return s.size();
    while (limit > 0 && (static_cast<unsigned char>(s[limit]) & 0xC0) == 0x80)
        --limit;
    return limit;
}

DenoisingExample corrupt_spans(std::span<const int> tokens, const std::vector<bool>& is_protected,
                               std::span<const int> sentinels, int eos, Rng& rng)
{
    constexpr double noise_density = 0.15;
    constexpr std::size_t max_span = 3;
    std::vector<std::size_t> open;
    for (std::size_t i = 0; i < tokens.size(); ++i)
        if (!is_protected[i])
            open.push_back(i);
    DenoisingExample ex;
    if (open.size() < 2 || sentinels.empty()) {
        ex.input.assign(tokens.begin(), tokens.end());
        return ex;
    }
    const auto target_noise =
        std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(noise_density * static_cast<double>(open.size()))));
    std::vector<bool> noise(tokens.size(), false);
    std::size_t marked = 0;
    for (std::size_t attempt = 0; marked < target_noise && attempt < 8 * tokens.size(); ++attempt) {
        std::size_t i = open[rng.below(open.size())];
        for (std::size_t len = 0; len < max_span && i < tokens.size() && marked < target_noise; ++len, ++i) {
            if (is_protected[i] || noise[i])
                break;
            noise[i] = true;
            ++marked;
        }
    }
    std::size_t span = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (!noise[i]) {
            ex.input.push_back(tokens[i]);
            continue;
        }
        const bool starts = i == 0 || !noise[i - 1];
        if (starts) {
            if (span == sentinels.size()) {
                // Out of sentinels: leave the rest visible.
                for (; i < tokens.size(); ++i)
                    noise[i] = false, ex.input.push_back(tokens[i]);
                break;
            }
            ex.input.push_back(sentinels[span]);
            ex.target.push_back(sentinels[span]);
            ++span;
        }
        ex.target.push_back(tokens[i]);
    }
    ex.target.push_back(eos);
    return ex;
}

template class BasicBackend<float>;
template class BasicBackend<double>;

} // namespace ipck
