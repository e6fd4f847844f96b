#pragma once

#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "kdlab/model.hpp"

namespace kdlab {

// Text checkpoints. Values are written as C99 hexadecimal float literals, so
// a save/load round trip reproduces every parameter bit for bit.

template <class T>
void save_model(const ModelBundle<T>& m, uint64_t vocab_hash, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    char buf[64];
    out << "kdlab-checkpoint v1\n";
    out << "role " << role_name(m.role) << '\n';
    out << "id " << m.id << '\n';
    std::snprintf(buf, sizeof buf, "%016" PRIx64, vocab_hash);
    out << "vocab_hash " << buf << '\n';
    const ModelConfig& c = m.config;
    out << "arch " << c.n_layers << ' ' << c.d_model << ' ' << c.n_heads << ' ' << c.ff_dim() << ' '
        << c.vocab_size << ' ' << c.n_classes << ' ' << c.max_len << '\n';
    for (const auto& [name, p] : m.params) {
        out << "param " << name;
        for (int d : p.shape()) out << ' ' << d;
        out << '\n';
        const auto& data = p.data();
        for (size_t i = 0; i < data.size(); ++i) {
            std::snprintf(buf, sizeof buf, "%a", static_cast<double>(data[i]));
            out << buf << (i + 1 == data.size() ? '\n' : ' ');
        }
    }
    out << "end\n";
    if (!out) throw std::runtime_error("write to " + path + " failed");
}

template <class T>
struct LoadedModel {
    ModelBundle<T> model;
    uint64_t vocab_hash = 0;
};

template <class T>
LoadedModel<T> load_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path);
    auto fail = [&path](const std::string& msg) { throw std::runtime_error(path + ": " + msg); };

    std::string line;
    if (!std::getline(in, line) || line != "kdlab-checkpoint v1") fail("not a checkpoint file");

    LoadedModel<T> out;
    ModelBundle<T>& m = out.model;
    bool saw_arch = false, saw_end = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string key;
        ss >> key;
        if (key == "role") {
            std::string r;
            ss >> r;
            m.role = role_from_name(r);
        } else if (key == "id") {
            ss >> std::ws;
            std::getline(ss, m.id);
        } else if (key == "vocab_hash") {
            std::string h;
            ss >> h;
            out.vocab_hash = std::stoull(h, nullptr, 16);
        } else if (key == "arch") {
            ModelConfig& c = m.config;
            if (!(ss >> c.n_layers >> c.d_model >> c.n_heads >> c.d_ff >> c.vocab_size >> c.n_classes >>
                  c.max_len)) {
                fail("malformed arch line");
            }
            saw_arch = true;
        } else if (key == "param") {
            if (!saw_arch) fail("param before arch line");
            std::string name;
            ss >> name;
            Shape shape;
            int d;
            while (ss >> d) shape.push_back(d);
            if (name.empty() || shape.empty()) fail("malformed param header");
            std::string values;
            if (!std::getline(in, values)) fail("missing values for param " + name);
            std::vector<T> data;
            data.reserve(numel(shape));
            const char* p = values.c_str();
            char* endp = nullptr;
            for (size_t i = 0; i < numel(shape); ++i) {
                const double v = std::strtod(p, &endp);
                if (endp == p) fail("param " + name + ": expected " + std::to_string(numel(shape)) +
                                    " values, got " + std::to_string(i));
                data.push_back(static_cast<T>(v));
                p = endp;
            }
            m.params[name] = Tensor<T>::from(std::move(data), std::move(shape), true);
        } else if (key == "end") {
            saw_end = true;
            break;
        } else {
            fail("unknown checkpoint key '" + key + "'");
        }
    }
    if (!saw_end) fail("truncated checkpoint (no end marker)");
    if (!saw_arch) fail("checkpoint has no arch line");
    m.config.validate();
    return out;
}

}  // namespace kdlab
