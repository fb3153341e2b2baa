#include "peel/image_io.hpp"

#include <cmath>
#include <fstream>
#include <vector>

namespace peel {

namespace {

// Reads one whitespace-delimited header token, skipping '#' comment lines.
std::string next_token(std::istream& in) {
    std::string tok;
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (std::isspace(c)) {
            c = in.get();
        } else {
            break;
        }
    }
    while (c != EOF && !std::isspace(c) && c != '#') {
        tok.push_back(static_cast<char>(c));
        c = in.get();
    }
    if (c == '#') in.unget(); // keep the comment for the next call
    return tok;
}

std::size_t parse_extent(const std::string& tok, const std::string& what,
                         const std::string& path) {
    if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos)
        throw io_error("malformed " + what + " in image header of " + path);
    const unsigned long long v = std::stoull(tok);
    if (v == 0) throw io_error(what + " must be positive in " + path);
    return static_cast<std::size_t>(v);
}

} // namespace

ImageWriteStats write_image(const std::string& path, const Tensor& img) {
    if (img.rank() != 3 || (img.dims[0] != 1 && img.dims[0] != 3))
        throw shape_error("image tensors must be (C,H,W) with C in {1,3}, got " +
                          dims_to_string(img.dims));
    require_finite(img, "image pixels");
    const std::size_t C = img.dims[0], H = img.dims[1], W = img.dims[2];

    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open " + path + " for writing");
    out << (C == 3 ? "P6" : "P5") << "\n" << W << " " << H << "\n255\n";

    ImageWriteStats stats;
    std::vector<unsigned char> row(W * C);
    for (std::size_t i = 0; i < H; ++i) {
        for (std::size_t j = 0; j < W; ++j)
            for (std::size_t c = 0; c < C; ++c) {
                const long q = std::lround(img.at(c, i, j));
                if (q < 0 || q > 255) ++stats.clamped;
                row[j * C + c] = static_cast<unsigned char>(
                    q < 0 ? 0 : (q > 255 ? 255 : q));
            }
        out.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw io_error("short write to " + path);
    return stats;
}

Tensor read_image(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open " + path);

    const std::string magic = next_token(in);
    std::size_t C = 0;
    if (magic == "P6") C = 3;
    else if (magic == "P5") C = 1;
    else throw io_error("unsupported image magic '" + magic + "' in " + path);

    const std::size_t W = parse_extent(next_token(in), "width", path);
    const std::size_t H = parse_extent(next_token(in), "height", path);
    const std::string maxval = next_token(in);
    if (maxval != "255")
        throw validation_error("only maxval 255 images are supported, got '" +
                               maxval + "' in " + path);
    // The header ends with exactly one whitespace byte before the payload;
    // next_token already consumed it while detecting the token boundary.

    Tensor img = Tensor::zeros({C, H, W});
    std::vector<unsigned char> row(W * C);
    for (std::size_t i = 0; i < H; ++i) {
        in.read(reinterpret_cast<char*>(row.data()),
                static_cast<std::streamsize>(row.size()));
        if (static_cast<std::size_t>(in.gcount()) != row.size())
            throw io_error("truncated pixel payload in " + path);
        for (std::size_t j = 0; j < W; ++j)
            for (std::size_t c = 0; c < C; ++c)
                img.at(c, i, j) = static_cast<double>(row[j * C + c]);
    }
    return img;
}

} // namespace peel
