#include "nullport/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

namespace nullport {

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

class GzReader {
public:
    explicit GzReader(const std::string& path) : path_(path) {
        file_ = gzopen(path.c_str(), "rb");
        if (!file_) throw std::runtime_error("cannot open " + path);
    }
    ~GzReader() {
        if (file_) gzclose(file_);
    }
    GzReader(const GzReader&) = delete;
    GzReader& operator=(const GzReader&) = delete;

    void read(void* dst, std::size_t len) {
        const int got = gzread(file_, dst, static_cast<unsigned>(len));
        if (got < 0 || static_cast<std::size_t>(got) != len)
            throw std::runtime_error("truncated or corrupt file: " + path_);
    }

    std::uint32_t read_u32_be() {
        unsigned char b[4];
        read(b, 4);
        return (static_cast<std::uint32_t>(b[0]) << 24) |
               (static_cast<std::uint32_t>(b[1]) << 16) |
               (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
    }

private:
    std::string path_;
    gzFile file_ = nullptr;
};

void put_u32_be(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v >> 24));
    out.push_back(static_cast<char>(v >> 16));
    out.push_back(static_cast<char>(v >> 8));
    out.push_back(static_cast<char>(v));
}

void write_blob(const std::string& path, const std::string& bytes) {
    if (path.size() > 3 && path.ends_with(".gz")) {
        gzFile f = gzopen(path.c_str(), "wb");
        if (!f) throw std::runtime_error("cannot open " + path + " for writing");
        const int wrote = gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
        gzclose(f);
        if (wrote <= 0 || static_cast<std::size_t>(wrote) != bytes.size())
            throw std::runtime_error("failed writing " + path);
        return;
    }
    std::ofstream os(path, std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("failed writing " + path);
}

}  // namespace

ImageDataset load_idx(const std::string& images_path, const std::string& labels_path) {
    GzReader img(images_path);
    if (img.read_u32_be() != kImageMagic)
        throw std::runtime_error(images_path + ": bad image magic");
    const std::uint32_t count = img.read_u32_be();
    const std::uint32_t rows = img.read_u32_be();
    const std::uint32_t cols = img.read_u32_be();

    GzReader lab(labels_path);
    if (lab.read_u32_be() != kLabelMagic)
        throw std::runtime_error(labels_path + ": bad label magic");
    const std::uint32_t lcount = lab.read_u32_be();
    if (lcount != count)
        throw std::runtime_error("image/label count mismatch: " + std::to_string(count) +
                                 " vs " + std::to_string(lcount));

    ImageDataset ds;
    ds.name = images_path;
    if (count == 0) return ds;

    std::vector<unsigned char> buf(static_cast<std::size_t>(count) * rows * cols);
    img.read(buf.data(), buf.size());
    ds.images = Tensor({count, 1, rows, cols});
    for (std::size_t i = 0; i < buf.size(); ++i)
        ds.images[i] = static_cast<double>(buf[i]) / 255.0;

    std::vector<unsigned char> lbuf(count);
    lab.read(lbuf.data(), lbuf.size());
    ds.labels.resize(count);
    int mx = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
        ds.labels[i] = lbuf[i];
        mx = std::max(mx, ds.labels[i]);
    }
    ds.num_classes = mx + 1;
    return ds;
}

void save_idx(const ImageDataset& ds, const std::string& images_path,
              const std::string& labels_path) {
    if (ds.count() > 0 && ds.images.extent(1) != 1)
        throw std::invalid_argument("save_idx supports single-channel images only");
    const std::uint32_t count = static_cast<std::uint32_t>(ds.count());
    const std::uint32_t rows = count ? static_cast<std::uint32_t>(ds.images.extent(2)) : 0;
    const std::uint32_t cols = count ? static_cast<std::uint32_t>(ds.images.extent(3)) : 0;

    std::string img;
    put_u32_be(img, kImageMagic);
    put_u32_be(img, count);
    put_u32_be(img, rows);
    put_u32_be(img, cols);
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
        const double v = std::clamp(ds.images[i], 0.0, 1.0);
        img.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
    write_blob(images_path, img);

    std::string lab;
    put_u32_be(lab, kLabelMagic);
    put_u32_be(lab, count);
    for (int l : ds.labels) {
        if (l < 0 || l > 255)
            throw std::invalid_argument("labels must fit in a byte for save_idx");
        lab.push_back(static_cast<char>(static_cast<unsigned char>(l)));
    }
    write_blob(labels_path, lab);
}

SequenceDataset synth_timeseries_windows(SeededRng& rng, std::size_t dims,
                                         std::size_t length, std::size_t window,
                                         std::size_t horizon) {
    if (dims == 0 || window == 0 || horizon == 0)
        throw std::invalid_argument("synth_timeseries_windows needs dims, window, horizon >= 1");
    if (length < window + horizon)
        throw std::invalid_argument("series too short: length must be >= window + horizon");

    Tensor series({length, dims});
    std::vector<double> period1(dims), period2(dims), phase(dims), amp(dims);
    for (std::size_t d = 0; d < dims; ++d) {
        period1[d] = 8.0 + rng.next_unit() * 24.0;
        period2[d] = 3.0 + rng.next_unit() * 9.0;
        phase[d] = rng.next_unit() * 2.0 * std::numbers::pi;
        amp[d] = 0.4 + 0.6 * rng.next_unit();
    }
    for (std::size_t t = 0; t < length; ++t)
        for (std::size_t d = 0; d < dims; ++d) {
            const double x = static_cast<double>(t);
            series(t, d) = amp[d] * std::sin(2.0 * std::numbers::pi * x / period1[d]) +
                           0.3 * std::sin(2.0 * std::numbers::pi * x / period2[d] + phase[d]) +
                           0.05 * rng.next_normal();
        }

    const std::size_t n = length - window - horizon + 1;
    SequenceDataset out;
    out.window = window;
    out.horizon = horizon;
    out.inputs = Tensor({n, window, dims});
    out.targets = Tensor({n, dims});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t t = 0; t < window; ++t)
            for (std::size_t d = 0; d < dims; ++d)
                out.inputs.data()[(i * window + t) * dims + d] = series(i + t, d);
        for (std::size_t d = 0; d < dims; ++d)
            out.targets(i, d) = series(i + window + horizon - 1, d);
    }
    return out;
}

ImageDataset synth_images(SeededRng& rng, std::size_t count, int classes,
                          std::size_t h, std::size_t w, double noise) {
    if (classes <= 0 || count == 0 || h == 0 || w == 0)
        throw std::invalid_argument("synth_images needs count, classes, extents >= 1");
    // Per-class template: white noise smoothed by two box-blur passes, then
    // squashed into the middle of the pixel range.
    std::vector<Tensor> templates;
    for (int c = 0; c < classes; ++c) {
        Tensor t = rng.normal({h, w});
        for (int pass = 0; pass < 2; ++pass) {
            Tensor s({h, w});
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    double acc = 0.0;
                    int cnt = 0;
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx) {
                            const std::ptrdiff_t yy = static_cast<std::ptrdiff_t>(y) + dy;
                            const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(x) + dx;
                            if (yy < 0 || xx < 0 || yy >= static_cast<std::ptrdiff_t>(h) ||
                                xx >= static_cast<std::ptrdiff_t>(w))
                                continue;
                            acc += t(static_cast<std::size_t>(yy),
                                     static_cast<std::size_t>(xx));
                            ++cnt;
                        }
                    s(y, x) = acc / cnt;
                }
            t = s;
        }
        double mn = t[0], mx = t[0];
        for (std::size_t i = 0; i < t.size(); ++i) {
            mn = std::min(mn, t[i]);
            mx = std::max(mx, t[i]);
        }
        const double span = mx > mn ? mx - mn : 1.0;
        for (std::size_t i = 0; i < t.size(); ++i)
            t[i] = 0.2 + 0.6 * (t[i] - mn) / span;
        templates.push_back(std::move(t));
    }

    ImageDataset ds;
    ds.name = "synthetic";
    ds.num_classes = classes;
    ds.images = Tensor({count, 1, h, w});
    ds.labels.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        const int c = static_cast<int>(i % static_cast<std::size_t>(classes));
        ds.labels[i] = c;
        for (std::size_t p = 0; p < h * w; ++p) {
            double v = templates[static_cast<std::size_t>(c)][p] + noise * rng.next_normal();
            v = std::clamp(v, 0.0, 1.0);
            ds.images[i * h * w + p] = std::lround(v * 255.0) / 255.0;
        }
    }
    return ds;
}

ImageDataset downsample_images(const ImageDataset& ds, std::size_t factor) {
    if (factor == 0) throw std::invalid_argument("downsample factor must be >= 1");
    if (factor == 1) return ds;
    const std::size_t n = ds.count();
    if (n == 0) return ds;
    const std::size_t c = ds.images.extent(1), h = ds.images.extent(2),
                      w = ds.images.extent(3);
    if (h % factor || w % factor)
        throw std::invalid_argument("downsample factor must divide image extents");
    const std::size_t oh = h / factor, ow = w / factor;
    ImageDataset out;
    out.labels = ds.labels;
    out.num_classes = ds.num_classes;
    out.name = ds.name;
    out.images = Tensor({n, c, oh, ow});
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < oh; ++y)
                for (std::size_t x = 0; x < ow; ++x) {
                    double acc = 0.0;
                    for (std::size_t dy = 0; dy < factor; ++dy)
                        for (std::size_t dx = 0; dx < factor; ++dx)
                            acc += ds.images.data()[((s * c + ch) * h + y * factor + dy) * w +
                                                    x * factor + dx];
                    out.images.data()[((s * c + ch) * oh + y) * ow + x] =
                        acc / static_cast<double>(factor * factor);
                }
    return out;
}

ImageDataset subset_images(const ImageDataset& ds, std::size_t count, SeededRng& rng) {
    if (count > ds.count())
        throw std::invalid_argument("subset larger than dataset");
    const std::vector<std::size_t> order = rng.shuffle(ds.count());
    ImageDataset out;
    out.num_classes = ds.num_classes;
    out.name = ds.name;
    const std::size_t c = ds.images.extent(1), h = ds.images.extent(2),
                      w = ds.images.extent(3);
    out.images = Tensor({count, c, h, w});
    out.labels.resize(count);
    const std::size_t per = c * h * w;
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t src = order[i];
        std::copy_n(ds.images.data() + src * per, per, out.images.data() + i * per);
        out.labels[i] = ds.labels[src];
    }
    return out;
}

Tensor flatten_images(const ImageDataset& ds) {
    const std::size_t n = ds.count();
    return ds.images.reshaped({n, ds.images.size() / n});
}

Tensor images_to_sequences(const ImageDataset& ds) {
    const std::size_t n = ds.count();
    return ds.images.reshaped({n, ds.images.size() / n, 1});
}

std::size_t DataView::count() const {
    if (!x) throw std::invalid_argument("DataView has no input tensor");
    return x->extent(0);
}

Batch DataView::gather(const std::vector<std::size_t>& idx) const {
    const std::size_t n = count();
    const std::size_t per = x->size() / n;
    std::vector<std::size_t> shape = x->shape();
    shape[0] = idx.size();
    Batch b;
    b.x = Tensor(shape);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= n) throw std::invalid_argument("gather index out of range");
        std::copy_n(x->data() + idx[i] * per, per, b.x.data() + i * per);
    }
    if (y) {
        const std::size_t yper = y->size() / n;
        std::vector<std::size_t> yshape = y->shape();
        yshape[0] = idx.size();
        b.y = Tensor(yshape);
        for (std::size_t i = 0; i < idx.size(); ++i)
            std::copy_n(y->data() + idx[i] * yper, yper, b.y.data() + i * yper);
    }
    if (labels) {
        b.labels.resize(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) b.labels[i] = (*labels)[idx[i]];
    }
    return b;
}

Batch DataView::all() const {
    std::vector<std::size_t> idx(count());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return gather(idx);
}

BatchIterator::BatchIterator(std::size_t count, std::size_t batch_size, SeededRng& rng)
    : order_(rng.shuffle(count)), batch_size_(batch_size) {
    if (batch_size == 0) throw std::invalid_argument("batch size must be >= 1");
}

std::optional<std::vector<std::size_t>> BatchIterator::next() {
    if (cursor_ >= order_.size()) return std::nullopt;
    const std::size_t end = std::min(cursor_ + batch_size_, order_.size());
    std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(end));
    cursor_ = end;
    return out;
}

}  // namespace nullport
