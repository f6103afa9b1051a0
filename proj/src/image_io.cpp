#include "mslae/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "mslae/error.hpp"

namespace mslae {

namespace {

std::vector<uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

bool is_gif(const std::vector<uint8_t>& bytes) {
  return bytes.size() >= 6 && std::equal(bytes.begin(), bytes.begin() + 3, "GIF");
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const uint8_t> bytes) : bytes_(bytes) {}
  uint8_t u8() {
    if (pos_ >= bytes_.size()) throw IoError("GIF: unexpected end of data");
    return bytes_[pos_++];
  }
  uint16_t u16() {
    const uint16_t lo = u8();
    return static_cast<uint16_t>(lo | (u8() << 8));
  }
  void skip(size_t n) {
    if (pos_ + n > bytes_.size()) throw IoError("GIF: unexpected end of data");
    pos_ += n;
  }
  std::span<const uint8_t> take(size_t n) {
    if (pos_ + n > bytes_.size()) throw IoError("GIF: unexpected end of data");
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  void skip_sub_blocks() {
    for (uint8_t n = u8(); n != 0; n = u8()) skip(n);
  }

 private:
  std::span<const uint8_t> bytes_;
  size_t pos_ = 0;
};

std::vector<uint8_t> lzw_decode(std::span<const uint8_t> data, int min_code_size, size_t expected) {
  if (min_code_size < 2 || min_code_size > 8) throw IoError("GIF: invalid LZW code size");
  constexpr int kMaxCodes = 4096;
  std::vector<int> prefix(kMaxCodes, -1);
  std::vector<uint8_t> suffix(kMaxCodes), first(kMaxCodes);
  const int clear = 1 << min_code_size;
  const int eoi = clear + 1;
  for (int i = 0; i < clear; ++i) {
    suffix[static_cast<size_t>(i)] = static_cast<uint8_t>(i);
    first[static_cast<size_t>(i)] = static_cast<uint8_t>(i);
  }
  int code_size = min_code_size + 1;
  int next = eoi + 1;
  int prev = -1;
  std::vector<uint8_t> out;
  out.reserve(expected);
  std::vector<uint8_t> stack;

  auto emit = [&](int code) {
    stack.clear();
    for (int c = code; c >= 0; c = prefix[static_cast<size_t>(c)]) stack.push_back(suffix[static_cast<size_t>(c)]);
    out.insert(out.end(), stack.rbegin(), stack.rend());
  };

  uint32_t bits = 0;
  int nbits = 0;
  size_t pos = 0;
  while (out.size() < expected) {
    while (nbits < code_size && pos < data.size()) {
      bits |= static_cast<uint32_t>(data[pos++]) << nbits;
      nbits += 8;
    }
    if (nbits < code_size) break;
    const int code = static_cast<int>(bits & ((1u << code_size) - 1));
    bits >>= code_size;
    nbits -= code_size;

    if (code == clear) {
      code_size = min_code_size + 1;
      next = eoi + 1;
      prev = -1;
      continue;
    }
    if (code == eoi) break;
    if (prev < 0) {
      if (code >= clear) throw IoError("GIF: corrupt LZW stream");
      emit(code);
      prev = code;
      continue;
    }
    uint8_t head;
    if (code < next) {
      emit(code);
      head = first[static_cast<size_t>(code)];
    } else if (code == next) {
      head = first[static_cast<size_t>(prev)];
      emit(prev);
      out.push_back(head);
    } else {
      throw IoError("GIF: corrupt LZW stream");
    }
    if (next < kMaxCodes) {
      prefix[static_cast<size_t>(next)] = prev;
      suffix[static_cast<size_t>(next)] = head;
      first[static_cast<size_t>(next)] = first[static_cast<size_t>(prev)];
      ++next;
      if (next == (1 << code_size) && code_size < 12) ++code_size;
    }
    prev = code;
  }
  out.resize(expected, 0);
  return out;
}

Tensor from_mat(const cv::Mat& decoded, int channels, const std::filesystem::path& path) {
  double scale = 1.0;
  switch (decoded.depth()) {
    case CV_8U: scale = 1.0 / 255.0; break;
    case CV_16U: scale = 1.0 / 65535.0; break;
    case CV_32F: scale = 1.0; break;
    default: throw IoError("unsupported sample depth in " + path.string());
  }
  cv::Mat img;
  decoded.convertTo(img, CV_32F, scale);
  const int64_t h = img.rows, w = img.cols;
  const int src_c = img.channels();
  std::vector<float> data(static_cast<size_t>(channels * h * w));
  for (int64_t y = 0; y < h; ++y) {
    const float* row = img.ptr<float>(static_cast<int>(y));
    for (int64_t x = 0; x < w; ++x) {
      const float* px = row + x * src_c;
      if (channels == 3) {
        for (int c = 0; c < 3; ++c) {
          // OpenCV stores BGR(A); grayscale is replicated.
          const float v = src_c >= 3 ? px[2 - c] : px[0];
          data[static_cast<size_t>((c * h + y) * w + x)] = v;
        }
      } else {
        data[static_cast<size_t>(y * w + x)] = src_c >= 3 ? (px[0] + px[1] + px[2]) / 3.0f : px[0];
      }
    }
  }
  return Tensor::from_data(Shape{1, channels, h, w}, std::move(data));
}

}  // namespace

GifFrame decode_gif(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  auto sig = r.take(6);
  if (!std::equal(sig.begin(), sig.begin() + 3, "GIF")) throw IoError("GIF: bad signature");
  GifFrame frame;
  frame.width = r.u16();
  frame.height = r.u16();
  const uint8_t packed = r.u8();
  r.skip(2);  // background index, aspect ratio
  std::vector<uint8_t> global;
  if (packed & 0x80) {
    auto t = r.take(3u * (1u << ((packed & 0x07) + 1)));
    global.assign(t.begin(), t.end());
  }
  if (frame.width <= 0 || frame.height <= 0) throw IoError("GIF: empty logical screen");
  frame.rgb.assign(static_cast<size_t>(frame.width * frame.height * 3), 0);

  for (;;) {
    const uint8_t block = r.u8();
    if (block == 0x3B) throw IoError("GIF: no image data");
    if (block == 0x21) {
      r.u8();  // label
      r.skip_sub_blocks();
      continue;
    }
    if (block != 0x2C) throw IoError("GIF: unknown block type");
    const int64_t left = r.u16(), top = r.u16(), w = r.u16(), h = r.u16();
    const uint8_t ipacked = r.u8();
    std::vector<uint8_t> palette = global;
    if (ipacked & 0x80) {
      auto t = r.take(3u * (1u << ((ipacked & 0x07) + 1)));
      palette.assign(t.begin(), t.end());
    }
    if (palette.empty()) throw IoError("GIF: no colour table");
    const bool interlaced = ipacked & 0x40;
    const int min_code = r.u8();
    std::vector<uint8_t> lzw;
    for (uint8_t n = r.u8(); n != 0; n = r.u8()) {
      auto t = r.take(n);
      lzw.insert(lzw.end(), t.begin(), t.end());
    }
    const std::vector<uint8_t> indices = lzw_decode(lzw, min_code, static_cast<size_t>(w * h));

    std::vector<int64_t> rows;
    if (interlaced) {
      for (auto [start, step] : {std::pair{0, 8}, {4, 8}, {2, 4}, {1, 2}})
        for (int64_t y = start; y < h; y += step) rows.push_back(y);
    } else {
      for (int64_t y = 0; y < h; ++y) rows.push_back(y);
    }
    for (int64_t i = 0; i < h; ++i) {
      const int64_t y = top + rows[static_cast<size_t>(i)];
      if (y >= frame.height) continue;
      for (int64_t x = 0; x < w; ++x) {
        const int64_t cx = left + x;
        if (cx >= frame.width) continue;
        const size_t idx = static_cast<size_t>(indices[static_cast<size_t>(i * w + x)]) * 3;
        if (idx + 2 >= palette.size()) continue;
        for (int c = 0; c < 3; ++c) frame.rgb[static_cast<size_t>((y * frame.width + cx) * 3 + c)] = palette[idx + c];
      }
    }
    return frame;
  }
}

Tensor read_image(const std::filesystem::path& path, int channels) {
  if (channels != 1 && channels != 3) throw ConfigError("read_image: channels must be 1 or 3");
  if (!std::filesystem::exists(path)) throw IoError("missing file " + path.string());
  const std::vector<uint8_t> bytes = read_bytes(path);
  if (is_gif(bytes)) {
    GifFrame f = decode_gif(bytes);
    // Wrap as an RGB Mat (OpenCV order BGR is handled by from_mat).
    cv::Mat m(static_cast<int>(f.height), static_cast<int>(f.width), CV_8UC3);
    for (int64_t i = 0; i < f.width * f.height; ++i) {
      m.data[i * 3 + 0] = f.rgb[static_cast<size_t>(i * 3 + 2)];
      m.data[i * 3 + 1] = f.rgb[static_cast<size_t>(i * 3 + 1)];
      m.data[i * 3 + 2] = f.rgb[static_cast<size_t>(i * 3 + 0)];
    }
    return from_mat(m, channels, path);
  }
  cv::Mat decoded;
  try {
    decoded = cv::imdecode(bytes, cv::IMREAD_UNCHANGED | cv::IMREAD_ANYDEPTH);
  } catch (const cv::Exception& e) {
    throw IoError("cannot decode " + path.string() + ": " + e.what());
  }
  if (decoded.empty()) throw IoError("cannot decode " + path.string());
  if (decoded.channels() == 4) cv::Mat(decoded).copyTo(decoded);
  return from_mat(decoded, channels, path);
}

std::vector<uint16_t> quantize_probabilities(std::span<const float> probabilities) {
  std::vector<uint16_t> q(probabilities.size());
  for (size_t i = 0; i < q.size(); ++i) {
    const double p = std::clamp(static_cast<double>(probabilities[i]), 0.0, 1.0);
    q[i] = static_cast<uint16_t>(std::lround(p * 65535.0));
  }
  return q;
}

void write_probability_png(const std::filesystem::path& path, const Tensor& probabilities) {
  const Shape& s = probabilities.shape();
  if (s.n != 1 || s.c != 1) throw ConfigError("write_probability_png: expected a 1x1xHxW map, got " + s.str());
  std::vector<uint16_t> q = quantize_probabilities(probabilities.data());
  cv::Mat m(static_cast<int>(s.h), static_cast<int>(s.w), CV_16UC1, q.data());
  if (!cv::imwrite(path.string(), m)) throw IoError("cannot write " + path.string());
}

void write_mask_png(const std::filesystem::path& path, std::span<const uint8_t> mask, int64_t height, int64_t width) {
  if (static_cast<int64_t>(mask.size()) != height * width) throw ConfigError("write_mask_png: size mismatch");
  cv::Mat m(static_cast<int>(height), static_cast<int>(width), CV_8UC1);
  for (size_t i = 0; i < mask.size(); ++i) m.data[i] = mask[i] ? 255 : 0;
  if (!cv::imwrite(path.string(), m, {cv::IMWRITE_PNG_BILEVEL, 1})) throw IoError("cannot write " + path.string());
}

void write_image_png(const std::filesystem::path& path, const Tensor& image) {
  const Shape& s = image.shape();
  if (s.n != 1 || (s.c != 1 && s.c != 3)) throw ConfigError("write_image_png: expected 1x{1,3}xHxW, got " + s.str());
  cv::Mat m(static_cast<int>(s.h), static_cast<int>(s.w), s.c == 3 ? CV_8UC3 : CV_8UC1);
  for (int64_t y = 0; y < s.h; ++y)
    for (int64_t x = 0; x < s.w; ++x)
      for (int64_t c = 0; c < s.c; ++c) {
        const int64_t dst_c = s.c == 3 ? 2 - c : 0;
        const float v = std::clamp(image.at(0, c, y, x), 0.0f, 1.0f);
        m.data[(y * s.w + x) * s.c + dst_c] = static_cast<uint8_t>(std::lround(v * 255.0f));
      }
  if (!cv::imwrite(path.string(), m)) throw IoError("cannot write " + path.string());
}

}  // namespace mslae
