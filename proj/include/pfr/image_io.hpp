#pragma once

#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "pfr/common.hpp"
#include "pfr/image.hpp"

namespace pfr {

inline uint8_t to_byte(float v) {
    const float s = std::min(1.0f, std::max(0.0f, v)) * 255.0f;
    return static_cast<uint8_t>(std::lround(s));
}

inline std::vector<uint8_t> to_rgb8(const ImageBuffer& img) {
    std::vector<uint8_t> out(img.size());
    for (size_t i = 0; i < img.size(); ++i) {
        out[i] = to_byte(img.data()[i]);
    }
    return out;
}

inline ImageBuffer from_rgb8(const uint8_t* p, int height, int width) {
    ImageBuffer img(height, width);
    for (size_t i = 0; i < img.size(); ++i) {
        img.data()[i] = static_cast<float>(p[i]) / 255.0f;
    }
    return img;
}

// ---------------------------------------------------------------------------
// JPEG (libjpeg, in-memory). The degradation pipeline depends on this codec
// being pinned: baseline, 4:4:4 (no chroma subsampling), quality as given.
// ---------------------------------------------------------------------------

namespace detail {
struct JpegErrorMgr {
    jpeg_error_mgr pub;
    jmp_buf setjmp_buffer;
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
    auto* mgr = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
    longjmp(mgr->setjmp_buffer, 1);
}
}  // namespace detail

inline std::vector<uint8_t> jpeg_encode(const ImageBuffer& img, int quality) {
    check(quality >= 1 && quality <= 100, "jpeg quality must be in [1,100]");
    std::vector<uint8_t> rgb = to_rgb8(img);

    jpeg_compress_struct cinfo;
    detail::JpegErrorMgr jerr;
    cinfo.err = jpeg_std_error(&jerr.pub);
    jerr.pub.error_exit = detail::jpeg_error_exit;

    unsigned char* buf = nullptr;
    unsigned long buf_size = 0;
    if (setjmp(jerr.setjmp_buffer)) {
        jpeg_destroy_compress(&cinfo);
        if (buf) free(buf);
        throw IoError("jpeg encode failed");
    }
    jpeg_create_compress(&cinfo);
    jpeg_mem_dest(&cinfo, &buf, &buf_size);

    cinfo.image_width = static_cast<JDIMENSION>(img.width());
    cinfo.image_height = static_cast<JDIMENSION>(img.height());
    cinfo.input_components = 3;
    cinfo.in_color_space = JCS_RGB;
    jpeg_set_defaults(&cinfo);
    jpeg_set_quality(&cinfo, quality, TRUE);
    // 4:4:4, keeps chroma error bounded at high quality.
    for (int i = 0; i < cinfo.num_components; ++i) {
        cinfo.comp_info[i].h_samp_factor = 1;
        cinfo.comp_info[i].v_samp_factor = 1;
    }
    jpeg_start_compress(&cinfo, TRUE);
    const size_t stride = static_cast<size_t>(img.width()) * 3;
    while (cinfo.next_scanline < cinfo.image_height) {
        JSAMPROW row = rgb.data() + cinfo.next_scanline * stride;
        jpeg_write_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_compress(&cinfo);
    jpeg_destroy_compress(&cinfo);

    std::vector<uint8_t> out(buf, buf + buf_size);
    free(buf);
    return out;
}

inline ImageBuffer jpeg_decode(const std::vector<uint8_t>& bytes) {
    jpeg_decompress_struct cinfo;
    detail::JpegErrorMgr jerr;
    cinfo.err = jpeg_std_error(&jerr.pub);
    jerr.pub.error_exit = detail::jpeg_error_exit;

    std::vector<uint8_t> rgb;
    if (setjmp(jerr.setjmp_buffer)) {
        jpeg_destroy_decompress(&cinfo);
        throw IoError("jpeg decode failed");
    }
    jpeg_create_decompress(&cinfo);
    jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);

    const int width = static_cast<int>(cinfo.output_width);
    const int height = static_cast<int>(cinfo.output_height);
    const size_t stride = static_cast<size_t>(width) * 3;
    rgb.resize(stride * height);
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW row = rgb.data() + cinfo.output_scanline * stride;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return from_rgb8(rgb.data(), height, width);
}

// Round-trip through the pinned codec; the degradation op JPEG_q.
inline ImageBuffer jpeg_roundtrip(const ImageBuffer& img, int quality) {
    return jpeg_decode(jpeg_encode(img, quality));
}

// ---------------------------------------------------------------------------
// PNG files
// ---------------------------------------------------------------------------

inline void write_png(const std::string& path, const ImageBuffer& img) {
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw IoError("cannot open for writing: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    std::vector<uint8_t> rgb = to_rgb8(img);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        std::fclose(fp);
        throw IoError("png write failed: " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width()),
                 static_cast<png_uint_32>(img.height()), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const size_t stride = static_cast<size_t>(img.width()) * 3;
    for (int y = 0; y < img.height(); ++y) {
        png_write_row(png, rgb.data() + y * stride);
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

inline ImageBuffer read_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw IoError("cannot open: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        std::fclose(fp);
        throw IoError("png read failed: " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);

    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);

    const int width = static_cast<int>(png_get_image_width(png, info));
    const int height = static_cast<int>(png_get_image_height(png, info));
    const size_t stride = png_get_rowbytes(png, info);
    check(stride == static_cast<size_t>(width) * 3, "unexpected png row size");

    std::vector<uint8_t> rgb(stride * height);
    for (int y = 0; y < height; ++y) {
        png_read_row(png, rgb.data() + y * stride, nullptr);
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return from_rgb8(rgb.data(), height, width);
}

inline ImageBuffer read_jpeg_file(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw IoError("cannot open: " + path);
    std::fseek(fp, 0, SEEK_END);
    const long n = std::ftell(fp);
    std::fseek(fp, 0, SEEK_SET);
    std::vector<uint8_t> bytes(static_cast<size_t>(n));
    const size_t got = std::fread(bytes.data(), 1, bytes.size(), fp);
    std::fclose(fp);
    if (got != bytes.size()) throw IoError("short read: " + path);
    return jpeg_decode(bytes);
}

// PNG out, PNG or JPEG in.
inline ImageBuffer read_image(const std::string& path) {
    const auto ext = std::filesystem::path(path).extension().string();
    if (ext == ".jpg" || ext == ".jpeg" || ext == ".JPG" || ext == ".JPEG") {
        return read_jpeg_file(path);
    }
    return read_png(path);
}

}  // namespace pfr
